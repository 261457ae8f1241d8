"""Finite differences for q u - P u = f in G, u - B_i u = psi on arc i, u = 0 at the corners.

The lattice is h Z^2 intersected with G.  Lattice nodes next to the boundary use
Shortley-Weller arms that end at boundary nodes (grid-line/boundary intersections).
Boundary rows read the images Omega_is(y) by bilinear interpolation over a cell
whose four vertices are interior nodes, so every off-diagonal entry of a boundary
row is -b * (nonnegative weight) and the row sum stays >= 1 - sum_s b_is >= 0.

Unknowns are ordered interior, boundary, corner.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    InsufficientRadii,
    IterationDivergence,
    MapImageTooShallow,
    SingularSystem,
    StepTooCoarse,
)
from .geometry import DomainSpec, OperatorCoefficients

log = logging.getLogger(__name__)

INTERIOR, BOUNDARY, CORNER = 0, 1, 2
SNAP = 1e-6  # lattice nodes within SNAP * h of the boundary become boundary nodes
MAX_SUBSTITUTION = 3.0  # in units of h
POSITIVITY_FLOOR = -1e-8

# arm order: east, west, north, south; diagonals: NE, NW, SW, SE
_ARMS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)])
_DIAG = np.array([(1, 1), (-1, 1), (-1, -1), (1, -1)])


def drift_threshold(coeffs: OperatorCoefficients, spec: DomainSpec) -> tuple[float, float]:
    """(h*, c0): central drift differencing is an M-matrix stencil for h < h* = 2 c0 / max |p_j|."""
    pts = np.concatenate([spec.sample_interior(32), spec.boundary_vertices])
    x, y = pts[:, 0], pts[:, 1]
    a = coeffs.principal(x, y)
    lam = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))[:, 0]
    c0 = coeffs.c0 if coeffs.c0 is not None else float(np.min(lam))
    pmax = float(np.max(np.abs(coeffs.drift(x, y)))) if coeffs.has_drift else 0.0
    return (2.0 * c0 / pmax if pmax > 0 else math.inf), c0


@dataclass(eq=False)
class Grid:
    spec: DomainSpec
    h: float
    nodes: np.ndarray  # (n, 2)
    kind: np.ndarray  # (n,) INTERIOR / BOUNDARY / CORNER
    arc: np.ndarray  # (n,) arc index of boundary nodes, -1 otherwise
    lattice: np.ndarray  # (n_interior, 2) integer lattice coordinates
    arms: np.ndarray  # (n_interior, 4) neighbour node per arm
    arm_len: np.ndarray  # (n_interior, 4)
    diag: np.ndarray  # (n_interior, 4) diagonal lattice neighbours (node index or -1)
    coupling: sp.csr_matrix  # (n, n): row y holds b_is(y) * bilinear weights of Omega_is(y)
    weight_sum: np.ndarray  # (n,) sum_s b_is(y)
    substitutions: list = field(default_factory=list)
    h_star: float = math.inf
    upwind: bool = False
    _table: dict | None = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_interior(self) -> int:
        return int(np.count_nonzero(self.kind == INTERIOR))

    @property
    def n_boundary(self) -> int:
        return int(np.count_nonzero(self.kind == BOUNDARY))

    @property
    def n_corner(self) -> int:
        return int(np.count_nonzero(self.kind == CORNER))

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.kind == INTERIOR)

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.kind == BOUNDARY)

    @cached_property
    def corner_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.kind == CORNER)

    def evaluate(self, func) -> np.ndarray:
        """Node values of a scalar, a callable f(x, y) or an array of node values."""
        if callable(func):
            v = np.asarray(func(self.nodes[:, 0], self.nodes[:, 1]), dtype=float)
            return np.broadcast_to(v, (self.n,)).copy()
        v = np.asarray(func, dtype=float)
        if v.ndim == 0:
            return np.full(self.n, float(v))
        if v.shape != (self.n,):
            raise ValueError(f"expected {self.n} node values, got shape {v.shape}")
        return v.copy()

    def field(self, values, q: float | None = None, label: str = "") -> "GridField":
        return GridField(self, self.evaluate(values), q, label)

    def lattice_node(self, i: int, j: int) -> int:
        return self._table.get((int(i), int(j)), -1)

    def cell_stencil(self, pts):
        """Bilinear stencil over the cell containing each point; -1 entries if a vertex is missing."""
        pts = np.atleast_2d(pts)
        ij = np.floor(pts / self.h).astype(int)
        loc = pts / self.h - ij
        idx = np.empty((len(pts), 4), dtype=int)
        for c, (di, dj) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
            idx[:, c] = [self.lattice_node(i + di, j + dj) for i, j in ij]
        s, t = loc[:, 0], loc[:, 1]
        w = np.column_stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
        return idx, w

    def summary(self) -> dict:
        return {
            "h": self.h,
            "nodes": self.n,
            "interior": self.n_interior,
            "boundary": self.n_boundary,
            "corner": self.n_corner,
            "nonlocal_links": int(self.coupling.nnz),
            "image_substitutions": len(self.substitutions),
            "drift_threshold_h": None if math.isinf(self.h_star) else self.h_star,
            "upwind": self.upwind,
        }


def _find_interior_cell(grid_table, h, p, radius_cells: int = 4):
    """Nearest cell (distance from p) whose four vertices are interior lattice nodes."""
    i0, j0 = int(math.floor(p[0] / h)), int(math.floor(p[1] / h))
    best = None
    for i in range(i0 - radius_cells, i0 + radius_cells + 1):
        for j in range(j0 - radius_cells, j0 + radius_cells + 1):
            vs = [grid_table.get((i + a, j + b), (-1, -1)) for a, b in ((0, 0), (1, 0), (0, 1), (1, 1))]
            if any(k != INTERIOR for _, k in vs):
                continue
            q = np.clip(p, (i * h, j * h), ((i + 1) * h, (j + 1) * h))
            d = float(np.hypot(*(q - p)))
            if best is None or d < best[0]:
                best = (d, i, j, q, [v for v, _ in vs])
    return best


def build_grid(spec: DomainSpec, h: float, allow_upwind: bool = False,
               coefficients: OperatorCoefficients | None = None) -> Grid:
    """Lattice, boundary nodes, Shortley-Weller arms and nonlocal interpolation stencils."""
    if not h > 0:
        raise ValueError("h must be positive")
    coeffs = coefficients or spec.coefficients
    h_star, _ = drift_threshold(coeffs, spec)
    if h >= h_star and not allow_upwind:
        raise StepTooCoarse(f"h = {h:g} >= drift threshold h* = {h_star:.6g}; refine or allow upwinding")
    poly = spec.polygon
    tol = SNAP * h
    lo = spec.boundary_vertices.min(axis=0)
    hi = spec.boundary_vertices.max(axis=0)
    ii = np.arange(math.ceil(lo[0] / h - 1e-9), math.floor(hi[0] / h + 1e-9) + 1)
    jj = np.arange(math.ceil(lo[1] / h - 1e-9), math.floor(hi[1] / h + 1e-9) + 1)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    ij = np.column_stack([I.ravel(), J.ravel()])
    pts = ij * h
    inside = poly.contains(pts)
    dist, edge, _ = poly.distance(pts)
    on_bd = dist <= tol
    interior = inside & ~on_bd

    int_ij = ij[interior]
    n_int = len(int_ij)
    table = {(int(a), int(b)): (k, INTERIOR) for k, (a, b) in enumerate(int_ij)}

    extra_pts: list[np.ndarray] = []
    extra_edge: list[int] = []
    extra_key: dict = {}

    def add_boundary(p, e):
        key = (round(p[0] / (h * 1e-7)), round(p[1] / (h * 1e-7)))
        k = extra_key.get(key)
        if k is None:
            k = len(extra_pts)
            extra_key[key] = k
            extra_pts.append(np.asarray(p, dtype=float))
            extra_edge.append(int(e))
        return k

    for (a, b), p, e in zip(ij[on_bd], pts[on_bd], edge[on_bd]):
        table[(int(a), int(b))] = (n_int + add_boundary(p, e), BOUNDARY)

    # arms
    arms = np.empty((n_int, 4), dtype=int)
    arm_len = np.full((n_int, 4), h)
    cross_src, cross_dir = [], []
    for d, (di, dj) in enumerate(_ARMS):
        for k, (a, b) in enumerate(int_ij):
            hit = table.get((int(a + di), int(b + dj)))
            if hit is not None:
                arms[k, d] = hit[0]
            else:
                cross_src.append(k)
                cross_dir.append(d)
    if cross_src:
        src = np.array(cross_src)
        dirs = _ARMS[np.array(cross_dir)]
        p0 = int_ij[src] * h
        t, e = poly.first_crossing(p0, p0 + h * dirs)
        bad = ~np.isfinite(t)
        if np.any(bad):
            # the neighbour is outside but no crossing was found (numerical tie): end the arm there
            _, e_fix, _ = poly.distance(p0[bad] + h * dirs[bad])
            t[bad], e[bad] = 1.0, e_fix
        for k, d, tt, ee, pp, dd in zip(src, cross_dir, t, e, p0, dirs):
            arms[k, d] = n_int + add_boundary(pp + tt * h * dd, ee)
            arm_len[k, d] = tt * h

    # diagonals (lattice nodes only)
    diag = np.full((n_int, 4), -1)
    for d, (di, dj) in enumerate(_DIAG):
        for k, (a, b) in enumerate(int_ij):
            hit = table.get((int(a + di), int(b + dj)))
            if hit is not None:
                diag[k, d] = hit[0]

    # classify boundary points: corners vs arcs
    bpts = np.array(extra_pts).reshape(-1, 2)
    barc = spec.edge_arc[np.array(extra_edge, dtype=int)] if extra_pts else np.zeros(0, dtype=int)
    bkind = np.full(len(bpts), BOUNDARY)
    if len(spec.corners):
        dk, kk = spec.corner_distance(bpts) if len(bpts) else (np.zeros(0), np.zeros(0, dtype=int))
        is_c = dk <= tol
        bkind[is_c] = CORNER
        bpts[is_c] = spec.corners[kk[is_c]]
        present = set(kk[is_c].tolist())
        missing = [c for c in range(len(spec.corners)) if c not in present]
        if missing:
            bpts = np.concatenate([bpts, spec.corners[missing]])
            barc = np.concatenate([barc, np.full(len(missing), -1)])
            bkind = np.concatenate([bkind, np.full(len(missing), CORNER)])

    # reorder: boundary before corners
    order = np.argsort(bkind, kind="stable")
    remap = np.empty(len(order), dtype=int)
    remap[order] = np.arange(len(order))
    bpts, barc, bkind = bpts[order], barc[order], bkind[order]
    arms = np.where(arms >= n_int, n_int + remap[np.maximum(arms - n_int, 0)], arms)
    diag = np.where(diag >= n_int, n_int + remap[np.maximum(diag - n_int, 0)], diag)
    lattice_table = {}
    for key, (k, kind) in table.items():
        lattice_table[key] = (k if kind == INTERIOR else n_int + remap[k - n_int], kind)
    for key, (k, kind) in list(lattice_table.items()):
        if kind != INTERIOR and bkind[k - n_int] == CORNER:
            lattice_table[key] = (k, CORNER)

    nodes = np.concatenate([int_ij * h, bpts]) if len(bpts) else int_ij * h
    kind = np.concatenate([np.full(n_int, INTERIOR), bkind])
    arc = np.concatenate([np.full(n_int, -1), np.where(bkind == BOUNDARY, barc, -1)])
    n = len(nodes)

    # nonlocal stencils
    rows, cols, vals = [], [], []
    wsum = np.zeros(n)
    subs = []
    bidx = np.flatnonzero(kind == BOUNDARY)
    for ia in range(len(spec.arcs)):
        on_arc = bidx[arc[bidx] == ia]
        if not len(on_arc):
            continue
        for mi, m in enumerate(spec.maps):
            if m.arc != ia:
                continue
            w = spec.map_weight(m, nodes[on_arc])
            act = on_arc[w > 0]
            wact = w[w > 0]
            if not len(act):
                continue
            img = m(nodes[act])
            wsum[act] += wact
            ijc = np.floor(img / h).astype(int)
            for node, b, p, (ci, cj) in zip(act, wact, img, ijc):
                vs = [lattice_table.get((ci + a, cj + c), (-1, -1)) for a, c in ((0, 0), (1, 0), (0, 1), (1, 1))]
                q = p
                if any(kd != INTERIOR for _, kd in vs):
                    found = _find_interior_cell(lattice_table, h, p)
                    if found is None or found[0] > MAX_SUBSTITUTION * h:
                        raise MapImageTooShallow(
                            f"image {p.tolist()} of boundary node {nodes[node].tolist()} has no interior cell within {MAX_SUBSTITUTION:g}h")
                    dsub, ci, cj, q, idxs = found
                    vs = [(v, INTERIOR) for v in idxs]
                    subs.append({"node": int(node), "map": mi, "point": nodes[node].tolist(), "image": p.tolist(),
                                 "distance": dsub})
                s_, t_ = q[0] / h - ci, q[1] / h - cj
                s_, t_ = min(max(s_, 0.0), 1.0), min(max(t_, 0.0), 1.0)
                bw = ((1 - s_) * (1 - t_), s_ * (1 - t_), (1 - s_) * t_, s_ * t_)
                for (v, _), ww in zip(vs, bw):
                    if ww > 0:
                        rows.append(node)
                        cols.append(v)
                        vals.append(b * ww)
    if subs:
        log.info("%d map images replaced by the nearest interior cell (max shift %.3g h)",
                 len(subs), max(s["distance"] for s in subs) / h)
    coupling = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    coupling.sum_duplicates()
    return Grid(spec, h, nodes, kind, arc, int_ij, arms, arm_len, diag, coupling, wsum, subs, h_star,
                bool(allow_upwind), {key: v[0] for key, v in lattice_table.items()})


# ---------------------------------------------------------------------------
# assembly


@dataclass(eq=False)
class LinearSystem:
    """A u = rhs with A = qE - P_h on interior rows, I - coupling on boundary rows, I at corners."""

    grid: Grid
    q: float
    A: sp.csr_matrix
    P: sp.csr_matrix  # discrete operator, interior rows only
    mmatrix_ok: bool
    violations: list
    upwinded: int
    mixed_dropped: int
    _lu: object = None
    _scale: np.ndarray | None = None

    @property
    def scale(self) -> np.ndarray:
        if self._scale is None:
            self._scale = 1.0 / np.abs(self.A.diagonal())
        return self._scale

    def rhs(self, f, psi=0.0) -> np.ndarray:
        g = self.grid
        fv = g.evaluate(f)
        pv = g.evaluate(psi)
        out = np.zeros(g.n)
        out[g.interior] = fv[g.interior]
        out[g.boundary] = pv[g.boundary]
        return out

    def _factor(self):
        if self._lu is None:
            As = sp.diags(self.scale) @ self.A
            try:
                self._lu = spla.splu(As.tocsc())
            except RuntimeError as exc:
                raise SingularSystem(f"factorization failed: {exc}") from exc
        return self._lu

    def solve_vector(self, rhs: np.ndarray) -> np.ndarray:
        As = sp.diags(self.scale) @ self.A
        b = self.scale * rhs
        u = self._factor().solve(b)
        target = 1e-10 * (np.max(np.abs(b)) + 1.0)
        r = b - As @ u
        if not np.all(np.isfinite(u)):
            raise SingularSystem("direct solve produced non-finite values")
        if np.max(np.abs(r)) > target:
            u = u + self._factor().solve(r)
            r = b - As @ u
        if np.max(np.abs(r)) > target:
            log.warning("direct solve residual %.3g, falling back to preconditioned GMRES", np.max(np.abs(r)))
            ilu = spla.spilu(As.tocsc(), drop_tol=1e-6)
            M = spla.LinearOperator(As.shape, ilu.solve)
            u, info = spla.gmres(As, b, x0=u, M=M, rtol=1e-14, atol=0.1 * target, restart=200, maxiter=50)
            r = b - As @ u
            if info != 0 or np.max(np.abs(r)) > target:
                raise IterationDivergence(f"iterative fallback failed (info={info}, residual {np.max(np.abs(r)):.3g})")
        u[self.grid.corner_nodes] = 0.0
        return u

    def apply_operator(self, values) -> np.ndarray:
        """P_h u at interior nodes (zero elsewhere)."""
        return self.P @ self.grid.evaluate(values)


def assemble(grid: Grid, coeffs: OperatorCoefficients | None = None, q: float = 1.0,
             spec: DomainSpec | None = None) -> LinearSystem:
    """Discretize q u - P u with Shortley-Weller arms, Motzkin mixed stencil and (if needed) upwinding."""
    if q < 0:
        raise ValueError("q must be nonnegative")
    coeffs = coeffs or (spec or grid.spec).coefficients
    n, ni, h = grid.n, grid.n_interior, grid.h
    X = grid.nodes[:ni]
    x, y = X[:, 0], X[:, 1]
    a = coeffs.principal(x, y)
    p11, p12, p22 = a[:, 0, 0], 0.5 * (a[:, 0, 1] + a[:, 1, 0]), a[:, 1, 1]
    dr = coeffs.drift(x, y)
    p0 = coeffs.potential(x, y) * np.ones(ni)
    hE, hW, hN, hS = grid.arm_len.T
    rows = [np.arange(ni)]
    cols = [np.arange(ni)]
    vals = [p0.copy()]
    upwinded = 0

    def axis_terms(hp, hm, diff, drift, ip, im):
        nonlocal upwinded
        cp = 2.0 / (hp * (hp + hm))
        cm = 2.0 / (hm * (hp + hm))
        dp = hm / (hp * (hp + hm))
        dm = -hp / (hm * (hp + hm))
        d0 = (hp - hm) / (hp * hm)
        wp = diff * cp + drift * dp
        wm = diff * cm + drift * dm
        need = (wp < 0) | (wm < 0)
        if grid.upwind and np.any(need):
            fwd = need & (drift > 0)
            bwd = need & (drift < 0)
            dp = np.where(fwd, 1.0 / hp, np.where(bwd, 0.0, dp))
            dm = np.where(fwd, 0.0, np.where(bwd, -1.0 / hm, dm))
            d0 = np.where(fwd, -1.0 / hp, np.where(bwd, 1.0 / hm, d0))
            upwinded += int(np.count_nonzero(need))
            wp = diff * cp + drift * dp
            wm = diff * cm + drift * dm
        w0 = -diff * (cp + cm) + drift * d0
        rows.extend([np.arange(ni)] * 3)
        cols.extend([ip, im, np.arange(ni)])
        vals.extend([wp, wm, w0])

    axis_terms(hE, hW, p11, dr[:, 0], grid.arms[:, 0], grid.arms[:, 1])
    axis_terms(hN, hS, p22, dr[:, 1], grid.arms[:, 2], grid.arms[:, 3])

    # mixed derivative: 2 p12 u_xy with the sign-adapted seven-point stencil
    mixed = np.abs(p12) > 0
    dropped = 0
    if np.any(mixed):
        full = np.all(grid.arm_len == h, axis=1) & np.all(grid.diag >= 0, axis=1)
        use = mixed & full
        dropped = int(np.count_nonzero(mixed & ~full))
        if dropped:
            log.info("mixed-derivative term dropped at %d near-boundary nodes", dropped)
        k = np.flatnonzero(use)
        c = np.abs(p12[k]) / h**2
        pos = p12[k] > 0
        d1 = np.where(pos, grid.diag[k, 0], grid.diag[k, 1])  # NE or NW
        d2 = np.where(pos, grid.diag[k, 2], grid.diag[k, 3])  # SW or SE
        for col, sgn in ((d1, 1), (d2, 1), (grid.arms[k, 0], -1), (grid.arms[k, 1], -1),
                         (grid.arms[k, 2], -1), (grid.arms[k, 3], -1), (k, 2)):
            rows.append(k)
            cols.append(col)
            vals.append(sgn * c)

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    P = sp.csr_matrix((v, (r, c)), shape=(n, n))
    P.sum_duplicates()

    E = sp.diags(np.where(grid.kind == INTERIOR, 1.0, 0.0))
    Bn = sp.diags(np.where(grid.kind == INTERIOR, 0.0, 1.0))
    A = (q * E - P + Bn - grid.coupling).tocsr()
    A.sum_duplicates()

    # M-matrix structure on interior rows
    violations = []
    Ai = A[:ni]
    off = Ai - sp.diags(Ai.diagonal(), shape=Ai.shape)
    oc = off.tocoo()
    bad_rows = np.unique(oc.row[oc.data > 1e-12 * np.max(np.abs(A.diagonal()))])
    dom = Ai.diagonal() - np.asarray(np.abs(off).sum(axis=1)).ravel()
    bad_dom = np.flatnonzero(dom < -1e-9 * np.abs(Ai.diagonal()))
    for k in np.union1d(bad_rows, bad_dom)[:20]:
        violations.append({"node": int(k), "point": grid.nodes[k].tolist()})
    mm_ok = len(bad_rows) == 0 and len(bad_dom) == 0
    if not mm_ok:
        log.warning("M-matrix structure violated at %d interior rows", len(np.union1d(bad_rows, bad_dom)))
    return LinearSystem(grid, float(q), A, P, mm_ok, violations, upwinded, dropped)


# ---------------------------------------------------------------------------
# fields and solves


@dataclass(eq=False)
class GridField:
    grid: Grid
    values: np.ndarray
    q: float | None = None
    label: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid field contains non-finite values")

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @property
    def l2(self) -> float:
        v = self.values[self.grid.interior]
        return float(math.sqrt(self.grid.h**2 * np.sum(v * v)))

    @property
    def min(self) -> float:
        return float(np.min(self.values))

    def at(self, pts) -> np.ndarray:
        """Bilinear interpolation from the lattice cell containing each point."""
        idx, w = self.grid.cell_stencil(pts)
        if np.any(idx < 0):
            raise ValueError("point too close to the boundary for lattice interpolation")
        return np.sum(self.values[idx] * w, axis=1)

    def boundary_defect(self) -> float:
        """max |u - B u| over boundary nodes (zero for members of C_B)."""
        g = self.grid
        r = self.values - g.coupling @ self.values
        vals = np.abs(r[g.boundary])
        c = np.abs(self.values[g.corner_nodes])
        return float(max(vals.max(initial=0.0), c.max(initial=0.0)))

    def with_values(self, values, label: str | None = None) -> "GridField":
        return GridField(self.grid, np.asarray(values, dtype=float), self.q, self.label if label is None else label)

    def to_rows(self):
        return [(float(x), float(y), float(v)) for (x, y), v in zip(self.grid.nodes, self.values)]


def solve_resolvent(system: LinearSystem, f=0.0, psi=0.0) -> GridField:
    """Solve q u - P_h u = f (interior), u - B u = psi (boundary), u = 0 (corners)."""
    u = system.solve_vector(system.rhs(f, psi))
    return GridField(system.grid, u, system.q, "u")


def project_to_CB(grid: Grid, values) -> np.ndarray:
    """Overwrite boundary and corner values so that u - B u = 0 and u = 0 on the corner set.

    Images are interpolated from interior nodes only, so this is explicit.
    """
    u = grid.evaluate(values)
    u[grid.corner_nodes] = 0.0
    u[grid.boundary] = (grid.coupling @ u)[grid.boundary]
    return u


@dataclass
class ResolventReport:
    q: float
    h: float
    sup_u: float
    sup_f: float
    ratio: float  # q ||u|| / ||f||
    tol_h: float
    bound_ok: bool
    f_nonnegative: bool
    min_u: float
    positivity_ok: bool | None
    witness: list | None
    mmatrix_ok: bool | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.positivity_ok is not False

    def to_json(self) -> dict:
        return {
            "q": self.q,
            "h": self.h,
            "sup_u": self.sup_u,
            "sup_f": self.sup_f,
            "contraction_ratio": self.ratio,
            "tol_h": self.tol_h,
            "bound_ok": self.bound_ok,
            "f_nonnegative": self.f_nonnegative,
            "min_u": self.min_u,
            "positivity_ok": self.positivity_ok,
            "witness": self.witness,
            "mmatrix_ok": self.mmatrix_ok,
            "passed": self.passed,
            "notes": self.notes,
        }


def verify_bounds(u: GridField, f, q: float | None = None, system: LinearSystem | None = None) -> ResolventReport:
    """Check ||u|| <= ||f|| / q * (1 + 10 h) and, for f >= 0, u >= -1e-8."""
    g = u.grid
    q = float(q if q is not None else u.q)
    fv = g.evaluate(f)[g.interior]
    sup_f = float(np.max(np.abs(fv))) if fv.size else 0.0
    tol_h = 10.0 * g.h
    sup_u = u.sup
    ratio = q * sup_u / sup_f if sup_f > 0 else (0.0 if sup_u == 0 else math.inf)
    bound_ok = sup_u <= sup_f / q * (1.0 + tol_h) + 1e-14
    nonneg = bool(np.all(fv >= 0))
    min_u = u.min
    pos_ok = (min_u >= POSITIVITY_FLOOR) if nonneg else None
    witness = None
    if not bound_ok:
        witness = g.nodes[int(np.argmax(np.abs(u.values)))].tolist()
    elif pos_ok is False:
        witness = g.nodes[int(np.argmin(u.values))].tolist()
    notes = ["q is a user parameter; the solver default q_min = 1 is a discretization choice, not a theoretical constant"]
    return ResolventReport(q, g.h, sup_u, sup_f, ratio, tol_h, bool(bound_ok), nonneg, min_u, pos_ok, witness,
                           None if system is None else system.mmatrix_ok, notes)


@dataclass
class DecayFit:
    exponent: float
    intercept: float
    radii: np.ndarray
    maxima: np.ndarray

    def __float__(self) -> float:
        return self.exponent


def corner_decay_profile(u: GridField, corner, radii, band: float | None = None) -> DecayFit:
    """Least-squares slope of log max_{|y-g| ~ r} |u(y)| against log r."""
    g = u.grid
    if np.ndim(corner) == 0:
        corner = g.spec.corners[int(corner)]
    c = np.asarray(corner, dtype=float)
    d = np.linalg.norm(g.nodes - c, axis=1)
    keep = g.kind != CORNER
    floor = 0.0
    used_r, used_m = [], []
    for r in np.asarray(radii, dtype=float):
        w = band if band is not None else max(0.75 * g.h, 0.05 * r)
        ring = keep & (np.abs(d - r) <= w)
        if not np.any(ring):
            continue
        m = float(np.max(np.abs(u.values[ring])))
        if m > floor:
            used_r.append(r)
            used_m.append(m)
    if len(used_r) < 4:
        raise InsufficientRadii(f"only {len(used_r)} usable rings (need 4)")
    lr, lm = np.log(used_r), np.log(used_m)
    slope, icpt = np.polyfit(lr, lm, 1)
    return DecayFit(float(slope), float(icpt), np.array(used_r), np.array(used_m))


def corner_decay_fit(u: GridField, corner, radii) -> float:
    return corner_decay_profile(u, corner, radii).exponent


def resolvent(spec: DomainSpec, h: float, q: float, allow_upwind: bool = False) -> LinearSystem:
    """Convenience: build the grid and assemble."""
    return assemble(build_grid(spec, h, allow_upwind), spec.coefficients, q)
