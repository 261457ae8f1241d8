"""Discrete Feller checks: resolvent contraction and positivity, implicit Euler, density scheme."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .barrier import build_barrier
from .errors import ContractionViolation, PositivityViolation
from .fdsolver import (
    POSITIVITY_FLOOR,
    Grid,
    GridField,
    LinearSystem,
    assemble,
    build_grid,
    project_to_CB,
    solve_resolvent,
)
from .geometry import DomainSpec, require_valid

_SYSTEMS: dict = {}


def resolvent_system(grid: Grid, q: float) -> LinearSystem:
    """Assembled (and lazily factorized) system for (grid, q), cached."""
    key = (id(grid), float(q))
    hit = _SYSTEMS.get(key)
    if hit is not None and hit.grid is grid:
        return hit
    if len(_SYSTEMS) > 32:
        _SYSTEMS.clear()
    sys = assemble(grid, grid.spec.coefficients, q)
    _SYSTEMS[key] = sys
    return sys


def random_smooth_field(grid: Grid, rng: np.random.Generator, nonnegative: bool = False, modes: int = 3) -> np.ndarray:
    """Random trigonometric field normalised to sup 1 over interior nodes."""
    x, y = grid.nodes[:, 0], grid.nodes[:, 1]
    v = np.full(grid.n, rng.normal())
    for kx in range(modes + 1):
        for ky in range(modes + 1):
            a, ph1, ph2 = rng.normal() / (1 + kx + ky), rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)
            v += a * np.cos(math.pi * kx * x + ph1) * np.cos(math.pi * ky * y + ph2)
    if nonnegative:
        v = v - v[grid.interior].min()
    s = np.max(np.abs(v[grid.interior]))
    return v / s if s > 0 else v


def backward_euler_step(u: GridField, dt: float, system: LinearSystem | None = None) -> GridField:
    """u' = R(1/dt)(u/dt), i.e. (I - dt P_B) u' = u with u' in C_B."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    q = 1.0 / dt
    system = system or resolvent_system(u.grid, q)
    out = solve_resolvent(system, u.values * q, 0.0)
    return GridField(u.grid, out.values, None, u.label)


@dataclass
class EvolutionLog:
    dt: float
    sup: list
    minimum: list
    final: GridField
    tol_h: float

    @property
    def steps(self) -> int:
        return len(self.sup) - 1

    @property
    def contraction_ok(self) -> bool:
        return all(b <= a * (1 + self.tol_h) + 1e-15 for a, b in zip(self.sup, self.sup[1:]))

    @property
    def positivity_ok(self) -> bool:
        return min(self.minimum) >= POSITIVITY_FLOOR

    def rows(self):
        return [(n, n * self.dt, s, m) for n, (s, m) in enumerate(zip(self.sup, self.minimum))]

    def to_json(self) -> dict:
        return {"dt": self.dt, "steps": self.steps, "sup": self.sup, "min": self.minimum,
                "contraction_ok": self.contraction_ok, "positivity_ok": self.positivity_ok, "tol_h": self.tol_h}


def evolve(u0: GridField, T: float, n_steps: int, strict: bool = True) -> EvolutionLog:
    """n_steps implicit Euler steps of size T / n_steps, logging sup-norm and minimum."""
    tol_h = 10.0 * u0.grid.h
    u = u0
    sup, mins = [u.sup], [u.min]
    if n_steps <= 0:
        return EvolutionLog(0.0, sup, mins, u, tol_h)
    dt = T / n_steps
    system = resolvent_system(u0.grid, 1.0 / dt)
    nonneg = u0.min >= 0
    for n in range(1, n_steps + 1):
        u = backward_euler_step(u, dt, system)
        sup.append(u.sup)
        mins.append(u.min)
        if strict and sup[-1] > sup[-2] * (1 + tol_h) + 1e-15:
            raise ContractionViolation(f"step {n}: sup grew from {sup[-2]:.6g} to {sup[-1]:.6g}")
        if strict and nonneg and mins[-1] < POSITIVITY_FLOOR:
            raise PositivityViolation(f"step {n}: min {mins[-1]:.3g} < {POSITIVITY_FLOOR}")
    return EvolutionLog(dt, sup, mins, u, tol_h)


def gaussian_blur(grid: Grid, values, sigma: float) -> np.ndarray:
    """Normalised Gaussian average over nodes within 3 sigma; corner values reset to 0."""
    v = grid.evaluate(values)
    tree = cKDTree(grid.nodes)
    out = np.empty(grid.n)
    nbrs = tree.query_ball_point(grid.nodes, 3.0 * sigma)
    for i, idx in enumerate(nbrs):
        idx = np.asarray(idx)
        d2 = np.sum((grid.nodes[idx] - grid.nodes[i]) ** 2, axis=1)
        w = np.exp(-0.5 * d2 / sigma**2)
        out[i] = np.dot(w, v[idx]) / w.sum()
    out[grid.corner_nodes] = 0.0
    return out


def boundary_maximum_witnesses(u: GridField, rtol: float = 1e-10) -> dict:
    """For boundary nodes with an active map where u attains its positive maximum, an interior
    node of the image stencil carrying the same value (None if there is none)."""
    g = u.grid
    top = float(np.max(u.values))
    out = {}
    if top <= 0:
        return out
    tol = rtol * top
    C = g.coupling.tocsr()
    for k in g.boundary[(g.weight_sum[g.boundary] > 0) & (u.values[g.boundary] >= top - tol)]:
        cols = C.indices[C.indptr[k]:C.indptr[k + 1]]
        hit = cols[u.values[cols] >= top - tol]
        out[int(k)] = int(hit[0]) if hit.size else None
    return out


@dataclass
class DensityResult:
    eps: float
    q: float
    lambdas: list
    errors: list  # ||u - u3(lambda)||
    smoothing_error: float  # ||u - u1||
    boundary_correction: float  # ||u1 - u2||
    yosida_errors: list  # ||u2 - u3(lambda)||
    c1: float | None
    smoothing_target: float

    @property
    def monotone(self) -> bool:
        return all(b <= a * (1 + 1e-12) for a, b in zip(self.errors, self.errors[1:]))

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.errors[-1] <= 3 * self.eps and self.monotone

    def to_json(self) -> dict:
        return {
            "eps": self.eps, "q": self.q, "lambdas": self.lambdas, "errors": self.errors,
            "smoothing_error": self.smoothing_error, "smoothing_target": self.smoothing_target,
            "boundary_correction": self.boundary_correction, "yosida_errors": self.yosida_errors,
            "c1": self.c1, "monotone": self.monotone, "passed": self.passed,
        }


def density_scheme(u: GridField, eps: float, q: float = 1.0, lambdas=(1.0, 10.0, 100.0, 1000.0),
                   sigma: float | None = None, c1: float | None = None) -> DensityResult:
    """Smooth u, correct back into C_B with one resolvent solve, then apply lambda R(lambda)."""
    g = u.grid
    sigma = 3.0 * g.h if sigma is None else sigma
    u1 = gaussian_blur(g, u.values, sigma)
    sq = resolvent_system(g, q)
    f = q * u1 - sq.apply_operator(u1)
    u2 = solve_resolvent(sq, f, 0.0).values
    errs, yos = [], []
    for lam in lambdas:
        sl = resolvent_system(g, lam)
        u3 = solve_resolvent(sl, lam * u2, 0.0).values
        errs.append(float(np.max(np.abs(u.values - u3))))
        yos.append(float(np.max(np.abs(u2 - u3))))
    target = eps if c1 is None else min(eps, eps / (2 * c1))
    return DensityResult(eps, q, [float(l) for l in lambdas], errs, float(np.max(np.abs(u.values - u1))),
                         float(np.max(np.abs(u1 - u2))), yos, c1, target)


def generic_cb_field(grid: Grid, rng: np.random.Generator) -> GridField:
    """A rough-ish member of C_B: random smooth field times a boundary bump plus a kink, projected."""
    x, y = grid.nodes[:, 0], grid.nodes[:, 1]
    lo = grid.nodes.min(axis=0)
    hi = grid.nodes.max(axis=0)
    s = (x - lo[0]) / (hi[0] - lo[0])
    t = (y - lo[1]) / (hi[1] - lo[1])
    base = random_smooth_field(grid, rng) * 16 * s * (1 - s) * t * (1 - t)
    kink = 0.3 * np.abs(s - rng.uniform(0.3, 0.7)) * 4 * s * (1 - s) * t * (1 - t)
    return GridField(grid, project_to_CB(grid, base + kink), None, "u")


@dataclass
class FellerReport:
    spec_name: str
    h: float
    q_grid: list
    contraction: dict  # q -> max ratio
    positivity: dict  # q -> (pass rate, min)
    density: DensityResult | None
    evolution: EvolutionLog | None
    tol_h: float
    notes: list = field(default_factory=list)

    @property
    def contraction_ok(self) -> bool:
        return all(r <= 1 + self.tol_h for r in self.contraction.values())

    @property
    def positivity_ok(self) -> bool:
        return all(rate == 1.0 for rate, _ in self.positivity.values())

    @property
    def density_ok(self) -> bool:
        return self.density is None or self.density.passed

    @property
    def passed(self) -> bool:
        ok = self.contraction_ok and self.positivity_ok and self.density_ok
        if self.evolution is not None:
            ok = ok and self.evolution.contraction_ok and self.evolution.positivity_ok
        return ok

    def to_json(self) -> dict:
        return {
            "spec": self.spec_name,
            "h": self.h,
            "tol_h": self.tol_h,
            "q_grid": self.q_grid,
            "contraction": {f"{q:g}": r for q, r in self.contraction.items()},
            "positivity": {f"{q:g}": {"pass_rate": r, "min": m} for q, (r, m) in self.positivity.items()},
            "density": None if self.density is None else self.density.to_json(),
            "evolution": None if self.evolution is None else self.evolution.to_json(),
            "checks": {"contraction": self.contraction_ok, "positivity": self.positivity_ok,
                       "density": self.density_ok},
            "passed": self.passed,
            "notes": self.notes,
        }

    def summary(self) -> str:
        lines = [f"Feller checklist for {self.spec_name} at h = {self.h:g}"]
        for q in self.q_grid:
            rate, m = self.positivity[q]
            lines.append(f"  q = {q:g}: max q|u|/|f| = {self.contraction[q]:.6f}, positivity {rate:.0%} (min {m:.3g})")
        if self.density is not None:
            errs = ", ".join(f"{e:.4g}" for e in self.density.errors)
            lines.append(f"  density errors over lambda {self.density.lambdas}: {errs}")
        lines.append("  conclusion: " + ("generator checks passed" if self.passed else "FAILED"))
        return "\n".join(lines)


def hille_iosida_checklist(spec: DomainSpec, h: float = 1.0 / 64, q_grid=(1.0, 10.0, 100.0), trials: int = 20,
                           seed: int = 0, eps: float = 0.1, lambdas=(1.0, 10.0, 100.0, 1000.0),
                           evolve_steps: int = 0, grid: Grid | None = None) -> FellerReport:
    require_valid(spec)
    rng = np.random.default_rng(seed)
    grid = grid or build_grid(spec, h)
    contraction, positivity = {}, {}
    for q in q_grid:
        sys = resolvent_system(grid, q)
        worst, passed, mn = 0.0, 0, math.inf
        for _ in range(trials):
            f = random_smooth_field(grid, rng)
            u = solve_resolvent(sys, f)
            worst = max(worst, q * u.sup / np.max(np.abs(f[grid.interior])))
            fp = random_smooth_field(grid, rng, nonnegative=True)
            up = solve_resolvent(sys, fp)
            passed += up.min >= POSITIVITY_FLOOR
            mn = min(mn, up.min)
        contraction[float(q)] = float(worst)
        positivity[float(q)] = (passed / trials if trials else 1.0, float(mn) if trials else 0.0)
    c1 = build_barrier(spec, 1.0, grid).c1
    dens = density_scheme(generic_cb_field(grid, rng), eps, 1.0, lambdas, c1=c1)
    evo = None
    if evolve_steps:
        u0 = GridField(grid, project_to_CB(grid, np.abs(random_smooth_field(grid, rng))), None, "u0")
        evo = evolve(u0, 0.01 * evolve_steps, evolve_steps, strict=False)
    notes = ["density of Dom(P_B) in C_B is a continuum statement; the scheme's error curve is its discrete proxy"]
    return FellerReport(spec.name, grid.h, [float(q) for q in q_grid], contraction, positivity, dens, evo,
                        10.0 * grid.h, notes)
