"""Feynman-Kac estimates of (qI - P_B)^{-1} f from the diffusion with boundary jumps.

Paths follow dX = p dt + sigma dW with sigma sigma^T = 2 (p_jk).  At a boundary hit y
on arc i the path restarts at Omega_is(y) with probability b_is(y) and is killed with
the defect probability; near a corner it is absorbed.  The running weight is
exp(-int (q - p0) dt) and the score is the discounted integral of f.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import UsageError
from .geometry import DomainSpec

KILLED, ABSORBED, TIME_CAP, ALIVE = 0, 1, 2, 3
CAUSES = {KILLED: "killed-at-boundary", ABSORBED: "absorbed-at-corner", TIME_CAP: "time-cap"}


@dataclass(frozen=True)
class PathConfig:
    dt: float = 1e-4
    q: float = 1.0
    t_max: float = 20.0
    boundary_tol: float = 1e-8  # relative to the diameter; floor for hit-point distances
    seed: int = 0
    corner_radius: float = 1e-3  # relative to the diameter
    batch_size: int = 10_000
    bridge: bool = True  # Brownian-bridge exit test between monitoring times
    workers: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError("dt must be positive")
        if not self.t_max > 0:
            raise UsageError("t_max must be positive")


@dataclass(frozen=True)
class PathOutcome:
    integral: float
    cause: str
    jumps: int
    time: float


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("NONLOCAL_FELLER_THREADS")
    n = requested if requested is not None else 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


class _Domain:
    """Cached geometry for fast path stepping."""

    def __init__(self, spec: DomainSpec, f, cfg: PathConfig):
        self.spec = spec
        self.poly = spec.polygon
        self.cfg = cfg
        self.diam = spec.diameter
        co = spec.coefficients
        self.co = co
        self.const = all(c.is_constant for c in (co.p11, co.p12, co.p21, co.p22, co.p1, co.p2, co.p0))
        if self.const:
            a = co.principal(np.zeros(1), np.zeros(1))[0]
            self.sigma = _sqrt_spd(2.0 * 0.5 * (a + a.T))[None]
            self.drift = co.drift(np.zeros(1), np.zeros(1))[0]
            self.p0 = float(co.potential(0.0, 0.0))
        self.f = f
        self.f_const = None if callable(f) else float(f)
        self.r_abs = cfg.corner_radius * self.diam
        self.corners = spec.corners
        self.maps_by_arc = {i: [m for m in spec.maps if m.arc == i] for i in range(len(spec.arcs))}
        # lower bound of dist(x, boundary) from a coarse signed-distance table (1-Lipschitz)
        lo = spec.boundary_vertices.min(axis=0)
        hi = spec.boundary_vertices.max(axis=0)
        n = 192
        self.cell = float(np.max(hi - lo)) / n
        self.lo = lo - 2 * self.cell
        m = n + 4
        cx = self.lo[0] + (np.arange(m) + 0.5) * self.cell
        cy = self.lo[1] + (np.arange(m) + 0.5) * self.cell
        X, Y = np.meshgrid(cx, cy, indexing="ij")
        sd = self.poly.signed_distance(np.column_stack([X.ravel(), Y.ravel()])).reshape(m, m)
        self.table = sd - 0.5 * math.sqrt(2) * self.cell
        self.m = m
        P = self.poly
        self.tree = None
        if P.n_edges > 32:
            self.tree = cKDTree(0.5 * (P.a + P.b))
            self.half_len = 0.5 * float(np.sqrt(P.len2.max()))
            self.k_near = 12

    def distance(self, x):
        """Exact nearest-edge distance; for many-edge polygons only the edges with the nearest midpoints
        are scanned, falling back to all edges when that set cannot be shown to contain the minimiser."""
        P = self.poly
        if self.tree is None or len(x) == 0:
            return P.distance(x)
        dm, cand = self.tree.query(x, k=self.k_near)
        a, d = P.a[cand], P.d[cand]
        t = np.clip(np.einsum("nkj,nkj->nk", x[:, None] - a, d) / P.len2[cand], 0.0, 1.0)
        proj = a + t[..., None] * d
        d2 = np.sum((x[:, None] - proj) ** 2, axis=-1)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(x))
        dist = np.sqrt(d2[rows, j])
        edge = cand[rows, j]
        foot = proj[rows, j]
        # any edge outside the candidate set is at least dm_k - half_len away
        bad = np.flatnonzero(dist > dm[:, -1] - self.half_len)
        if bad.size:
            db, eb, fb = P.distance(x[bad])
            dist[bad], edge[bad], foot[bad] = db, eb, fb
        return dist, edge, foot

    def lower_distance(self, x):
        ij = np.floor((x - self.lo) / self.cell).astype(int)
        ij = np.clip(ij, 0, self.m - 1)
        return self.table[ij[:, 0], ij[:, 1]]

    def coeffs(self, x):
        if self.const:
            n = len(x)
            return np.broadcast_to(self.sigma, (n, 2, 2)), np.broadcast_to(self.drift, (n, 2)), np.full(n, self.p0)
        a = self.co.principal(x[:, 0], x[:, 1])
        sig = _sqrt_spd(2.0 * 0.5 * (a + np.swapaxes(a, -1, -2)))
        return sig, self.co.drift(x[:, 0], x[:, 1]), np.asarray(self.co.potential(x[:, 0], x[:, 1])) * np.ones(len(x))

    def fval(self, x):
        if self.f_const is not None:
            return np.full(len(x), self.f_const)
        return np.asarray(self.f(x[:, 0], x[:, 1]), dtype=float) * np.ones(len(x))


def _sqrt_spd(a):
    """Symmetric square root of 2x2 SPD matrices (closed form)."""
    a = np.asarray(a, dtype=float)
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    s = np.sqrt(det)
    t = np.sqrt(a[..., 0, 0] + a[..., 1, 1] + 2 * s)
    eye = np.eye(2)
    return (a + s[..., None, None] * eye) / t[..., None, None]


def _segment_corner_distance(x0, x1, g):
    d = x1 - x0
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", g - x0, d) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    return np.linalg.norm(x0 + t[:, None] * d - g, axis=1)


def _simulate(dom: _Domain, x0, n: int, rng: np.random.Generator):
    """Vectorized paths from x0; returns (integral, cause, jumps, time, final position) arrays."""
    cfg = dom.cfg
    dt, q = cfg.dt, cfg.q
    sq = math.sqrt(dt)
    X = np.tile(np.asarray(x0, dtype=float), (n, 1))
    W = np.ones(n)
    acc = np.zeros(n)
    tm = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    cause = np.full(n, ALIVE)
    alive = np.arange(n)
    edge_arc = dom.spec.edge_arc
    while alive.size:
        x = X[alive]
        m = len(alive)
        sig, drift, p0 = dom.coeffs(x)
        z = rng.standard_normal((m, 2))
        if dom.const:
            xn = x + (drift[0] * dt) + (sq * z) @ dom.sigma[0].T
        else:
            xn = x + drift * dt + sq * np.einsum("nij,nj->ni", sig, z)
        tau = np.ones(m)
        hit = np.zeros(m, dtype=bool)
        hit_pt = xn.copy()
        hit_edge = np.full(m, -1)
        lb = dom.lower_distance(x)
        step = np.linalg.norm(xn - x, axis=1)
        cand = np.flatnonzero(step >= lb)
        if cand.size:
            t, e = dom.poly.first_crossing(x[cand], xn[cand])
            crossed = np.isfinite(t)
            k = cand[crossed]
            tau[k] = t[crossed]
            hit[k] = True
            hit_edge[k] = e[crossed]
            hit_pt[k] = x[k] + t[crossed, None] * (xn[k] - x[k])
        if cfg.bridge:
            # exit between monitoring times: P = exp(-2 d0 d1 / (s_n^2 dt)) for a locally flat boundary
            # exp(-2 d^2 / (s^2 dt)) < 1e-10 once d > 3.4 s sqrt(dt)
            spread = sq * np.linalg.norm(sig, axis=(1, 2))
            near = np.flatnonzero(~hit & (lb < 3.4 * spread))
            if near.size:
                d0, _, _ = dom.distance(x[near])
                d1, e1, f1 = dom.distance(xn[near])
                ed = dom.poly.d[e1]
                nrm = np.column_stack([ed[:, 1], -ed[:, 0]]) / np.linalg.norm(ed, axis=1)[:, None]
                sn = np.einsum("ni,nij,nj->n", nrm, np.einsum("nij,nkj->nik", sig[near], sig[near]), nrm)
                p = np.exp(-2.0 * d0 * d1 / np.maximum(sn * dt, 1e-300))
                u = rng.random(near.size)
                k = near[u < p]
                sel = u < p
                hit[k] = True
                hit_edge[k] = e1[sel]
                hit_pt[k] = f1[sel]
        c = q - p0
        h = tau * dt
        decay = np.exp(-c * h)
        gain = np.where(c > 0, (1.0 - decay) / np.where(c > 0, c, 1.0), h)
        acc[alive] += dom.fval(x) * W[alive] * gain
        W[alive] *= decay
        tm[alive] += h
        new_x = np.where(hit[:, None], hit_pt, xn)
        status = np.full(m, ALIVE)
        # corner absorption: the step (up to the hit) passes within r_abs of a corner
        # corners lie on the boundary, so only steps that get close to it can reach a corner ball
        close = np.flatnonzero(lb < dom.r_abs + step) if len(dom.corners) else []
        for g in dom.corners if len(close) else ():
            dc = _segment_corner_distance(x[close], new_x[close], g)
            status[close[dc < dom.r_abs]] = ABSORBED
        bh = np.flatnonzero(hit & (status == ALIVE))
        if bh.size:
            u = rng.random(bh.size)
            arcs = edge_arc[hit_edge[bh]]
            dest = np.full(bh.size, -1)
            dest_pt = hit_pt[bh].copy()
            cum = np.zeros(bh.size)
            for ia in np.unique(arcs):
                sel = np.flatnonzero(arcs == ia)
                for mp in dom.maps_by_arc.get(int(ia), []):
                    w = dom.spec.map_weight(mp, hit_pt[bh[sel]])
                    lo = cum[sel]
                    cum[sel] = lo + w
                    take = (dest[sel] < 0) & (u[sel] >= lo) & (u[sel] < lo + w)
                    ts = sel[take]
                    dest[ts] = 1
                    dest_pt[ts] = mp(hit_pt[bh[ts]])
            jumped = dest > 0
            status[bh[~jumped]] = KILLED
            jb = bh[jumped]
            new_x[jb] = dest_pt[jumped]
            jumps[alive[jb]] += 1
        X[alive] = new_x
        status[(status == ALIVE) & (tm[alive] >= cfg.t_max)] = TIME_CAP
        done = status != ALIVE
        cause[alive[done]] = status[done]
        alive = alive[~done]
    return acc, cause, jumps, tm, X


_DOMAINS: dict = {}


def _domain(spec, f, cfg) -> _Domain:
    key = (id(spec), id(f) if callable(f) else float(f), cfg)
    hit = _DOMAINS.get(key)
    if hit is None or hit.spec is not spec:
        if len(_DOMAINS) > 16:
            _DOMAINS.clear()
        hit = _DOMAINS[key] = _Domain(spec, f, cfg)
    return hit


def _batch(args):
    spec, f, cfg, x0, n, b = args
    dom = _domain(spec, f, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(b,)))
    return _simulate(dom, x0, n, rng)


_SINGLE = 1 << 31  # spawn-key prefix keeping single-path streams apart from batch streams


def sample_path(x0, spec: DomainSpec, f, cfg: PathConfig, index: int = 0) -> PathOutcome:
    """One path, drawn from its own substream (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_SINGLE, index)))
    acc, cause, jumps, tm, _ = _simulate(_domain(spec, f, cfg), x0, 1, rng)
    return PathOutcome(float(acc[0]), CAUSES[int(cause[0])], int(jumps[0]), float(tm[0]))


@dataclass
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    q: float
    histogram: dict
    mean_jumps: float
    f_sup: float
    bound_ok: bool
    nonneg_ok: bool | None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths, "q": self.q,
            "termination": self.histogram, "mean_jumps": self.mean_jumps,
            "resolvent_bound": self.f_sup / self.q, "bound_ok": self.bound_ok, "nonneg_ok": self.nonneg_ok,
            "config": self.config,
        }


def _f_sup(spec, f) -> tuple[float, bool]:
    if not callable(f):
        return abs(float(f)), float(f) >= 0
    pts = np.concatenate([spec.sample_interior(64), spec.boundary_vertices])
    v = np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
    return float(np.max(np.abs(v))), bool(np.all(v >= 0))


def run_paths(x0, spec: DomainSpec, f, n_paths: int, cfg: PathConfig):
    """(integral, cause, jumps, time, final position) of every path, in batch order.

    Batch b draws from SeedSequence(seed, spawn_key=(b,)), so the result does not
    depend on how batches are spread over workers.
    """
    sizes = [min(cfg.batch_size, n_paths - s) for s in range(0, n_paths, cfg.batch_size)]
    jobs = [(spec, f, cfg, tuple(np.asarray(x0, dtype=float)), n, b) for b, n in enumerate(sizes)]
    workers = worker_count(cfg.workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            parts = list(ex.map(_batch, jobs))
    else:
        parts = [_batch(j) for j in jobs]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))


def estimate_resolvent(x0, spec: DomainSpec, f, q: float, n_paths: int, cfg: PathConfig | None = None) -> MCEstimate:
    if not q > 0:
        raise UsageError("q must be positive")
    cfg = replace(cfg or PathConfig(), q=float(q))
    x0 = np.asarray(x0, dtype=float)
    if not spec.contains(x0[None])[0]:
        raise UsageError(f"start point {x0.tolist()} is not inside the domain")
    acc, cause, jumps, _, _ = run_paths(x0, spec, f, n_paths, cfg)
    mean = float(np.mean(acc))
    se = float(np.std(acc, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    hist = {name: int(np.count_nonzero(cause == k)) for k, name in CAUSES.items()}
    fs, nonneg = _f_sup(spec, f)
    return MCEstimate(mean, se, n_paths, float(q), hist, float(np.mean(jumps)), fs,
                      abs(mean) <= fs / q + 3 * se, (mean >= -3 * se) if nonneg else None,
                      {"dt": cfg.dt, "t_max": cfg.t_max, "seed": cfg.seed, "bridge": cfg.bridge,
                       "corner_radius": cfg.corner_radius, "batch_size": cfg.batch_size})


@dataclass
class CrossRow:
    point: tuple
    u_fd: float
    u_mc: float
    stderr: float
    tolerance: float

    @property
    def diff(self) -> float:
        return abs(self.u_fd - self.u_mc)

    @property
    def passed(self) -> bool:
        return self.diff <= self.tolerance


@dataclass
class CrossValidation:
    rows: list
    h: float
    dt: float
    allowance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self):
        return [(r.point[0], r.point[1], r.u_fd, r.u_mc, r.stderr, r.diff, r.tolerance, r.passed) for r in self.rows]

    def to_json(self) -> dict:
        return {"h": self.h, "dt": self.dt, "allowance": self.allowance, "passed": self.passed,
                "rows": [{"x": r.point[0], "y": r.point[1], "u_fd": r.u_fd, "u_mc": r.u_mc, "stderr": r.stderr,
                          "diff": r.diff, "tolerance": r.tolerance, "passed": r.passed} for r in self.rows]}


def cross_validate(spec: DomainSpec, f, q: float, points, n_paths: int, cfg: PathConfig | None = None,
                   h: float = 1.0 / 64, allowance: float = 0.02, solution=None) -> CrossValidation:
    """Compare the FD resolvent with the MC estimate; pass when |diff| <= 3 stderr + allowance."""
    from .fdsolver import resolvent, solve_resolvent

    cfg = replace(cfg or PathConfig(), q=float(q))
    if solution is None:
        solution = solve_resolvent(resolvent(spec, h, q), f)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ufd = solution.at(pts)
    rows = []
    for p, u in zip(pts, ufd):
        est = estimate_resolvent(p, spec, f, q, n_paths, cfg)
        rows.append(CrossRow((float(p[0]), float(p[1])), float(u), est.mean, est.stderr, 3 * est.stderr + allowance))
    return CrossValidation(rows, solution.grid.h, cfg.dt, allowance)


def calibrate_allowance(n_paths: int = 20_000, cfg: PathConfig | None = None, h: float = 1.0 / 64) -> dict:
    """Bias of both estimators on the disk oracle u(0) = 1 - 1/I0(1) (q = 1, f = 1)."""
    from .fdsolver import resolvent, solve_resolvent
    from .library import unit_disk

    exact = 1.0 - 1.0 / bessel_i0(1.0)
    spec = unit_disk()
    cfg = replace(cfg or PathConfig(), q=1.0)
    est = estimate_resolvent((0.0, 0.0), spec, 1.0, 1.0, n_paths, cfg)
    u = solve_resolvent(resolvent(spec, h, 1.0), 1.0)
    fd = float(u.values[u.grid.lattice_node(0, 0)])
    c = (abs(est.mean - exact) + abs(fd - exact)) / (h * h + cfg.dt)
    return {"exact": exact, "mc": est.mean, "mc_stderr": est.stderr, "fd": fd, "C": c,
            "allowance": c * (h * h + cfg.dt)}


def bessel_i0(x: float, terms: int = 60) -> float:
    """Power series sum (x/2)^{2k} / (k!)^2."""
    s, t = 0.0, 1.0
    for k in range(terms):
        s += t
        t *= (0.5 * x) ** 2 / (k + 1) ** 2
    return s


def bessel_i1(x: float, terms: int = 60) -> float:
    s, t = 0.0, 0.5 * x
    for k in range(terms):
        s += t
        t *= (0.5 * x) ** 2 / ((k + 1) * (k + 2))
    return s
