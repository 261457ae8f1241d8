"""Positive bounded barrier v with q1 v - P v = 0 in G and v - B v = 1 on the boundary.

Near each corner v is seeded by w1 = xi(r) phi_j(omega), where phi_j is the
linear angular profile solving the pencil's lambda = 0 system with unit data.
The remainder v1 = v - w1 solves the resolvent problem with
    q1 v1 - P v1 = P w1 - q1 w1,    v1 - B v1 = 1 - w1 + B w1,
whose data vanish close to the corners, so v1 -> 0 there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonpositiveInfimum, PositivityFailure, SingularAtZero
from .fdsolver import CORNER, Grid, GridField, assemble, build_grid, solve_resolvent
from .geometry import DomainSpec, PencilSystem, compute_orbits, localize, quintic_cutoff_derivs
from .pencil import characteristic_matrix

RESIDUAL_TOL = 1e-12


@dataclass
class AngularProfile:
    """phi_j(omega) = a_j + b_j omega on [-omega_j, omega_j]."""

    half_openings: tuple[float, ...]
    a: np.ndarray
    b: np.ndarray
    residual: float

    def __call__(self, j: int, omega):
        return self.a[j] + self.b[j] * np.asarray(omega, dtype=float)

    def endpoint_values(self) -> np.ndarray:
        w = np.asarray(self.half_openings)
        return np.column_stack([self.a - self.b * w, self.a + self.b * w])

    def to_json(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "half_openings": list(self.half_openings),
                "residual": self.residual}


def solve_angular(sys: PencilSystem) -> AngularProfile:
    """Solve the lambda = 0 boundary rows with right-hand side 1 in the basis (1, omega)."""
    m = characteristic_matrix(sys, 0.0).real
    rhs = np.ones(2 * sys.size)
    if not np.all(np.isfinite(m)) or np.linalg.cond(m) > 1e13:
        raise SingularAtZero("lambda = 0 is (numerically) an eigenvalue of the pencil")
    x = np.linalg.solve(m, rhs)
    res = float(np.max(np.abs(m @ x - rhs)))
    prof = AngularProfile(sys.half_openings, x[0::2].copy(), x[1::2].copy(), res)
    ends = prof.endpoint_values()
    if np.any(ends <= 0):
        j, s = np.unravel_index(int(np.argmin(ends)), ends.shape)
        raise PositivityFailure(f"phi_{j} = {ends[j, s]:.6g} at omega = {(-1) ** (s + 1) * sys.half_openings[j]:.6g}",
                                witness={"corner": int(j), "side": int(s + 1), "value": float(ends[j, s])})
    return prof


@dataclass(eq=False)
class BarrierField:
    grid: Grid
    q1: float
    v: GridField
    w1: GridField
    v1: GridField
    profiles: list  # (orbit corners, AngularProfile)
    cutoff: tuple[float, float]  # xi = 1 for r <= cutoff[0], 0 for r >= cutoff[1]
    m: float
    c1: float
    witness: list | None = None
    notes: list = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return self.grid.kind != CORNER

    def to_json(self) -> dict:
        return {
            "q1": self.q1,
            "h": self.grid.h,
            "m": self.m,
            "c1": self.c1,
            "cutoff": list(self.cutoff),
            "orbits": [{"corners": list(c), "phi": p.to_json()} for c, p in self.profiles],
            "argmin": self.witness,
            "notes": self.notes,
        }


def _corner_seed(spec: DomainSpec, profiles, pts: np.ndarray, p_coeffs=None):
    """w1 and, if requested, P w1 at the given points (closed-form polar derivatives)."""
    w = np.zeros(len(pts))
    pw = np.zeros(len(pts)) if p_coeffs is not None else None
    inner, outer = 0.5 * spec.eps, spec.eps
    for corners, prof in profiles:
        for j, c in enumerate(corners):
            info = spec.corner_info[c]
            z = info.to_local(pts)
            r = np.abs(z)
            near = (r < outer) & (r > 0)
            if not np.any(near):
                continue
            z, r = z[near], r[near]
            om = np.angle(z)
            xi, dxi, ddxi = quintic_cutoff_derivs(r, inner, outer)
            phi = prof(j, om)
            bj = prof.b[j]
            w[near] += xi * phi
            if pw is None:
                continue
            # polar derivatives of xi(r) phi(omega), phi'' = 0
            wr, wo, wrr, wro = dxi * phi, xi * bj, ddxi * phi, dxi * bj
            co, so = np.cos(om), np.sin(om)
            t1 = wr / r
            t2 = wro / r - wo / r**2
            hxx = co**2 * wrr + so**2 * t1 - 2 * so * co * t2
            hyy = so**2 * wrr + co**2 * t1 + 2 * so * co * t2
            hxy = so * co * (wrr - t1) + (co**2 - so**2) * t2
            gx = co * wr - so * wo / r
            gy = so * wr + co * wo / r
            # rotate local frame (bisector along +x) back to global
            cb, sb = np.cos(info.bisector), np.sin(info.bisector)
            R = np.array([[cb, -sb], [sb, cb]])
            H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
            Hg = R @ H @ R.T
            g = np.stack([gx, gy], -1) @ R.T
            X = pts[near]
            a = p_coeffs.principal(X[:, 0], X[:, 1])
            d = p_coeffs.drift(X[:, 0], X[:, 1])
            p0 = p_coeffs.potential(X[:, 0], X[:, 1])
            pw[near] += np.einsum("nij,nij->n", a, Hg) + np.einsum("ni,ni->n", d, g) + p0 * xi * phi
    return w, pw


def angular_profiles(spec: DomainSpec) -> list:
    return [(o.corners, solve_angular(localize(spec, o))) for o in compute_orbits(spec)]


def build_barrier(spec: DomainSpec, q1: float = 1.0, grid=None, h: float | None = None) -> BarrierField:
    """Barrier on a grid (given, or built with step ``h``); certifies inf v > 0 over non-corner nodes."""
    if grid is None:
        grid = build_grid(spec, h if h is not None else 1.0 / 64)
    elif not isinstance(grid, Grid):
        grid = build_grid(spec, float(grid))
    profiles = angular_profiles(spec)
    pts = grid.nodes
    w1, pw1 = _corner_seed(spec, profiles, pts, spec.coefficients)
    w1[grid.corner_nodes] = 0.0

    # exact nonlocal term of w1 at boundary nodes
    bw1 = np.zeros(grid.n)
    b = grid.boundary
    for mp in spec.maps:
        on = b[grid.arc[b] == mp.arc]
        if len(on):
            wt = spec.map_weight(mp, pts[on])
            img, _ = _corner_seed(spec, profiles, mp(pts[on]))
            bw1[on] += wt * img

    system = assemble(grid, spec.coefficients, q1)
    f = np.zeros(grid.n)
    f[grid.interior] = pw1[grid.interior] - q1 * w1[grid.interior]
    psi = np.zeros(grid.n)
    psi[b] = 1.0 - w1[b] + bw1[b]
    v1 = solve_resolvent(system, f, psi)
    vv = w1 + v1.values
    vv[grid.corner_nodes] = 0.0
    mask = grid.kind != CORNER
    k = np.flatnonzero(mask)
    i = k[int(np.argmin(vv[k]))]
    m = float(vv[i])
    c1 = float(np.max(vv[k]))
    fld = BarrierField(grid, float(q1), GridField(grid, vv, q1, "v"), GridField(grid, w1, q1, "w1"),
                       v1, profiles, (0.5 * spec.eps, spec.eps), m, c1, grid.nodes[i].tolist(),
                       ["q1 is a user parameter (default 1); positivity is certified on grid nodes only"])
    if m <= 0:
        raise NonpositiveInfimum(f"inf v = {m:.3g} at {grid.nodes[i].tolist()}; refine h", witness=grid.nodes[i].tolist())
    return fld


def constant_c1(field: BarrierField) -> float:
    return field.c1
