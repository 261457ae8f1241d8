"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from nonlocal_feller.barrier import solve_angular
from nonlocal_feller.fdsolver import (
    BOUNDARY,
    GridField,
    assemble,
    build_grid,
    corner_decay_fit,
    project_to_CB,
    resolvent,
    solve_resolvent,
)
from nonlocal_feller.geometry import PencilSystem, compute_orbits, localize
from nonlocal_feller.library import square_nonlocal, unit_disk, unit_square, wedge, wedge_nonlocal
from nonlocal_feller.montecarlo import PathConfig, bessel_i0, bessel_i1, cross_validate
from nonlocal_feller.pencil import (
    Rect,
    certify_strips,
    characteristic_matrix,
    count_zeros,
    dirichlet_system,
    find_eigenvalues,
    random_system,
)
from nonlocal_feller.semigroup import density_scheme, evolve, generic_cb_field, random_smooth_field

PI = math.pi


@pytest.fixture
def verdict(capsys, request):
    """Record named sub-checks; print one PASS/FAIL line for the criterion and fail on any miss."""
    checks = []

    def check(ok, detail):
        checks.append((bool(ok), detail))

    yield check
    number, title = request.node.function.criterion
    ok = bool(checks) and all(c for c, _ in checks)
    detail = "; ".join(d for _, d in checks)
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
    misses = [d for c, d in checks if not c]
    assert not misses, misses


def criterion(number, title):
    def mark(fn):
        fn.criterion = (number, title)
        return fn

    return mark


@criterion(1, "pencil eigenvalues vs closed form")
def test_pencil_closed_form(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for w in (PI / 4, PI / 2, 3 * PI / 4):
        want = np.array([-1j * k * PI / (2 * w) for k in (1, 2, 3)])
        top = 3 * PI / (2 * w)
        spec = find_eigenvalues(dirichlet_system(w), (-top - 0.25, -0.05), window=5)
        got = np.array(sorted(spec.values, key=lambda z: -z.imag))
        verdict(got.size == 3 and all(e.count == 1 for e in spec.eigenvalues), f"omega={w:.4f}: {got.size} zeros")
        if got.size == 3:
            worst = max(worst, float(np.max(np.abs(got - want))))
    dt = time.perf_counter() - t0
    verdict(worst < 1e-8, f"max |dlambda| = {worst:.1e}")
    verdict(dt < 10, f"{dt:.1f} s")


@criterion(2, "no pencil zeros on the real axis (20 random admissible systems)")
def test_no_real_axis_zeros(verdict):
    t0 = time.perf_counter()
    counts = [count_zeros(random_system(np.random.default_rng(1000 + s)), Rect(-20, 20, -1e-3, 1e-3))
              for s in range(20)]
    dt = time.perf_counter() - t0
    verdict(all(c == 0 for c in counts), f"counts {sorted(set(counts))}")
    verdict(dt < 120, f"{dt:.1f} s")


@criterion(3, "positive angular barrier profiles")
def test_barrier_positivity(verdict):
    worst_res, worst_min = 0.0, math.inf
    for s in range(50):
        sys = random_system(np.random.default_rng(2000 + s))
        prof = solve_angular(sys)
        x = np.empty(2 * sys.size)
        x[0::2], x[1::2] = prof.a, prof.b
        worst_res = max(worst_res, float(np.max(np.abs(characteristic_matrix(sys, 0.0).real @ x - 1))))
        worst_min = min(worst_min, float(prof.endpoint_values().min()))
    verdict(worst_res < 1e-12, f"max residual {worst_res:.1e}")
    verdict(worst_min > 0, f"min phi {worst_min:.3g}")
    prof = solve_angular(PencilSystem.from_terms([PI / 2], [(0, 2, 0, 0.5, -PI / 2, 1.0)]))
    err = max(abs(prof.a[0] - 4 / 3), abs(prof.b[0] - 2 / (3 * PI)))
    verdict(err < 1e-12, f"worked example error {err:.1e}")


def _square_sweep(nonnegative):
    g = build_grid(square_nonlocal(), 1 / 64)
    rng = np.random.default_rng(4 if not nonnegative else 5)
    out = {}
    for q in (1.0, 10.0, 100.0):
        s = assemble(g, g.spec.coefficients, q)
        vals = []
        for _ in range(20):
            f = random_smooth_field(g, rng, nonnegative=nonnegative)
            u = solve_resolvent(s, f)
            vals.append(u.min if nonnegative else q * u.sup / np.max(np.abs(f[g.interior])))
        out[q] = vals
    return g, out


@criterion(4, "resolvent contraction q|u|/|f| <= 1 + 10h")
def test_resolvent_contraction(verdict):
    t0 = time.perf_counter()
    g, ratios = _square_sweep(False)
    dt = time.perf_counter() - t0
    for q, r in ratios.items():
        verdict(max(r) <= 1 + 10 * g.h, f"q={q:g}: max {max(r):.4f}")
    verdict(dt < 60, f"{dt:.1f} s")


@criterion(5, "resolvent positivity for f >= 0")
def test_resolvent_positivity(verdict):
    _, mins = _square_sweep(True)
    allmin = min(min(v) for v in mins.values())
    n = sum(len(v) for v in mins.values())
    verdict(n == 60 and allmin >= -1e-8, f"{n} solves, min u = {allmin:.2e}")


def _polygon_oracle(n=256):
    """Disk value 1 - 1/I0(1) plus the first-order shift from the inscribed n-gon."""
    a = PI / n
    mean_dr = (n / PI) * math.cos(a) * math.log(1 / math.cos(a) + math.tan(a)) - 1
    return 1 - 1 / bessel_i0(1.0) + bessel_i1(1.0) / bessel_i0(1.0) ** 2 * mean_dr


@criterion(6, "disk oracle and second-order refinement")
def test_disk_oracle(verdict):
    # q u - Lap u = 1 is the same problem as Lap u - u = -1
    spec = unit_disk()
    exact = 1 - 1 / bessel_i0(1.0)
    oracle = _polygon_oracle()
    centre = {}
    for h in (1 / 16, 1 / 32, 1 / 64, 1 / 128):
        u = solve_resolvent(resolvent(spec, h, 1.0), 1.0)
        centre[h] = float(u.values[u.grid.lattice_node(0, 0)])
    err128 = abs(centre[1 / 128] - exact)
    verdict(err128 < 2e-2, f"|u(0) - (1 - 1/I0(1))| = {err128:.2e} at h=1/128")
    e = {h: abs(v - oracle) for h, v in centre.items()}
    for h in (1 / 16, 1 / 32):
        r = e[h] / e[h / 2]
        verdict(3.5 <= r <= 4.5, f"ratio {int(1 / h)}->{int(2 / h)}: {r:.2f}")


@criterion(7, "Monte Carlo vs finite differences on the nonlocal square")
def test_mc_cross_validation(verdict):
    t0 = time.perf_counter()
    spec = square_nonlocal()
    pts = [(0.1, 0.1), (0.25, 0.05), (0.5, 0.5), (0.05, 0.3), (0.7, 0.2)]
    u = solve_resolvent(resolvent(spec, 1 / 128, 1.0), 1.0)
    cv = cross_validate(spec, 1.0, 1.0, pts, 100_000, PathConfig(dt=1e-4, seed=7), solution=u, allowance=0.02)
    dt = time.perf_counter() - t0
    for r in cv.rows:
        verdict(r.passed, f"({r.point[0]:g},{r.point[1]:g}) |{r.u_fd:.4f}-{r.u_mc:.4f}|={r.diff:.4f}<={r.tolerance:.4f}")
    verdict(dt < 300, f"{dt:.0f} s")


def _psi_decay(spec, h=1 / 256):
    g = build_grid(spec, h)
    psi = np.where((g.kind == BOUNDARY) & (g.arc == 1), 1.0, 0.0)
    u = solve_resolvent(assemble(g, spec.coefficients, 1.0), 0.0, psi)
    return corner_decay_fit(u, 0, np.geomspace(6 * h, 0.125, 8))


@criterion(8, "corner decay exponents vs the pencil")
def test_corner_decay(verdict):
    got = _psi_decay(wedge(0.75 * PI))
    verdict(abs(got - 2 / 3) <= 0.10 * 2 / 3, f"re-entrant wedge {got:.4f} vs 2/3")
    spec = wedge_nonlocal()
    lead = certify_strips(localize(spec, compute_orbits(spec)[0])).leading_decay
    got = _psi_decay(spec)
    verdict(lead is not None and abs(got - lead) <= 0.15 * lead, f"nonlocal wedge {got:.4f} vs {lead:.4f}")


@criterion(9, "backward-Euler evolution is contractive and positive")
def test_feller_evolution(verdict):
    g = build_grid(square_nonlocal(), 1 / 64)
    u0 = GridField(g, project_to_CB(g, np.abs(random_smooth_field(g, np.random.default_rng(9)))))
    log = evolve(u0, 1.0, 100, strict=False)
    grow = max(b / a for a, b in zip(log.sup, log.sup[1:]))
    verdict(log.steps == 100 and log.contraction_ok, f"max step ratio {grow:.4f}")
    verdict(log.positivity_ok, f"min {min(log.minimum):.2e}")
    sq = build_grid(unit_square(), 1 / 64)
    e0 = GridField(sq, project_to_CB(sq, lambda x, y: np.sin(PI * x) * np.sin(PI * y)))
    dt = 0.01
    for n in (10, 100):
        r = evolve(e0, n * dt, n)
        got, want = r.sup[-1] / r.sup[0], (1 + 2 * PI**2 * dt) ** -n
        verdict(abs(got / want - 1) <= 0.05, f"n={n}: ratio {got:.4e} vs {want:.4e}")


@criterion(10, "density scheme reaches 3 eps with decreasing errors")
def test_density_scheme(verdict):
    g = build_grid(square_nonlocal(), 1 / 64)
    d = density_scheme(generic_cb_field(g, np.random.default_rng(10)), 0.1)
    verdict(d.errors[-1] <= 0.3, f"error at lambda={d.lambdas[-1]:g}: {d.errors[-1]:.4f}")
    verdict(d.monotone, "errors " + ", ".join(f"{e:.3f}" for e in d.errors))
