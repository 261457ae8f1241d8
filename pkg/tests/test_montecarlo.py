import math
from dataclasses import replace

import numpy as np
import pytest

from nonlocal_feller.errors import UsageError
from nonlocal_feller.fdsolver import resolvent, solve_resolvent
from nonlocal_feller.library import square_nonlocal, unit_disk, unit_square
from nonlocal_feller.montecarlo import (
    ABSORBED,
    KILLED,
    TIME_CAP,
    PathConfig,
    bessel_i0,
    bessel_i1,
    cross_validate,
    estimate_resolvent,
    run_paths,
    sample_path,
)

CFG = PathConfig(seed=3, batch_size=500)
DISK_CENTRE = 1 - 1 / bessel_i0(1.0)


def test_bessel_series_against_known_values():
    assert bessel_i0(1.0) == pytest.approx(1.2660658777520082, abs=1e-15)
    assert bessel_i1(1.0) == pytest.approx(0.5651591039924851, abs=1e-15)
    assert DISK_CENTRE == pytest.approx(0.2101, abs=1e-4)


def test_zero_source_scores_zero():
    out = sample_path((0.3, 0.4), square_nonlocal(), 0.0, CFG)
    assert out.integral == 0.0
    assert out.cause in {"killed-at-boundary", "absorbed-at-corner", "time-cap"}
    acc, *_ = run_paths((0.3, 0.4), square_nonlocal(), 0.0, 200, CFG)
    assert np.all(acc == 0.0)


def test_without_weights_paths_never_jump():
    acc, cause, jumps, tm, X = run_paths((0.5, 0.5), unit_square(), 1.0, 1000, CFG)
    assert np.all(jumps == 0)
    assert set(np.unique(cause)) <= {KILLED, ABSORBED}
    assert np.all(unit_square().polygon.distance(X[cause == KILLED])[0] < 1e-9)


def test_unit_weight_plateau_never_kills():
    spec = square_nonlocal(weight=1.0)
    m = spec.maps[0]
    acc, cause, jumps, tm, X = run_paths((0.1, 0.05), spec, 1.0, 2000, CFG)
    assert jumps.sum() > 0
    on_bottom = (cause == KILLED) & (np.abs(X[:, 1]) < 1e-9) & (X[:, 0] > 0)
    assert on_bottom.any()
    assert np.all(spec.map_weight(m, X[on_bottom]) < 1.0)


def test_jumps_land_on_map_images():
    spec = square_nonlocal(weight=1.0)
    out = [sample_path((0.05, 0.02), spec, 1.0, CFG, index=i) for i in range(20)]
    assert any(o.jumps > 0 for o in out)
    assert all(math.isfinite(o.integral) and o.time > 0 for o in out)


def test_seed_determinism():
    a = run_paths((0.2, 0.3), square_nonlocal(), 1.0, 1200, CFG)
    b = run_paths((0.2, 0.3), square_nonlocal(), 1.0, 1200, CFG)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = run_paths((0.2, 0.3), square_nonlocal(), 1.0, 1200, replace(CFG, seed=4))
    assert not np.array_equal(a[0], c[0])


def test_results_do_not_depend_on_worker_count(monkeypatch):
    monkeypatch.delenv("NONLOCAL_FELLER_THREADS", raising=False)
    one = run_paths((0.2, 0.3), square_nonlocal(), 1.0, 1200, replace(CFG, workers=1))
    two = run_paths((0.2, 0.3), square_nonlocal(), 1.0, 1200, replace(CFG, workers=2))
    for x, y in zip(one, two):
        assert np.array_equal(x, y)


def test_discount_is_monotone_under_common_random_numbers():
    spec = square_nonlocal()
    lo = run_paths((0.4, 0.4), spec, 1.0, 1000, replace(CFG, q=1.0))
    hi = run_paths((0.4, 0.4), spec, 1.0, 1000, replace(CFG, q=3.0))
    assert np.array_equal(lo[1], hi[1]) and np.array_equal(lo[3], hi[3])
    assert np.all(hi[0] <= lo[0])


def test_kill_accounting():
    spec = square_nonlocal()
    n = 2000
    _, cause, *_ = run_paths((0.2, 0.2), spec, 1.0, n, CFG)
    p_min = 1 - 0.5  # smallest defect over hit points
    frac = np.mean(cause == KILLED)
    assert frac >= p_min - 3 * math.sqrt(p_min * (1 - p_min) / n)


def test_time_cap_is_rarely_hit():
    _, cause, *_ = run_paths((0.5, 0.5), square_nonlocal(), 1.0, 2000, CFG)
    assert np.count_nonzero(cause == TIME_CAP) <= 1e-6 * len(cause)
    _, cause, _, tm, _ = run_paths((0.5, 0.5), square_nonlocal(), 1.0, 200, replace(CFG, t_max=0.01))
    assert np.count_nonzero(cause == TIME_CAP) > 0 and tm.max() <= 0.01 + CFG.dt


def test_reported_bounds():
    est = estimate_resolvent((0.3, 0.6), square_nonlocal(), 1.0, 2.0, 2000, CFG)
    assert est.bound_ok and est.nonneg_ok
    assert est.mean <= 0.5 + 3 * est.stderr
    assert sum(est.histogram.values()) == 2000
    assert est.to_json()["resolvent_bound"] == pytest.approx(0.5)


def test_usage_errors():
    with pytest.raises(UsageError):
        estimate_resolvent((0.5, 0.5), unit_square(), 1.0, 0.0, 10)
    with pytest.raises(UsageError):
        estimate_resolvent((1.5, 0.5), unit_square(), 1.0, 1.0, 10)
    with pytest.raises(UsageError):
        PathConfig(dt=0.0)


@pytest.mark.slow
def test_disk_centre_matches_the_bessel_oracle():
    est = estimate_resolvent((0.0, 0.0), unit_disk(), 1.0, 1.0, 100_000, PathConfig(seed=0))
    assert abs(est.mean - DISK_CENTRE) <= 3 * est.stderr + 0.01


@pytest.mark.slow
def test_disk_cross_validation_at_five_radii():
    spec = unit_disk()
    pts = [(r, 0.0) for r in (0.0, 0.2, 0.4, 0.6, 0.8)]
    cv = cross_validate(spec, 1.0, 1.0, pts, 10_000, PathConfig(seed=5), h=1 / 64)
    assert cv.passed, cv.table()
    exact = [1 - bessel_i0(r) / bessel_i0(1.0) for r, _ in pts]
    for row, u in zip(cv.rows, exact):
        assert abs(row.u_fd - u) < 1e-3
        assert abs(row.u_mc - u) <= 3 * row.stderr + 0.02


@pytest.mark.slow
def test_strong_discount_keeps_both_estimators_small():
    spec = square_nonlocal()
    f = lambda x, y: np.cos(2 * x) * (1 + y)
    fsup = 2.0
    pts = [(0.3, 0.3), (0.6, 0.5)]
    u = solve_resolvent(resolvent(spec, 1 / 64, 100.0), f)
    cv = cross_validate(spec, f, 100.0, pts, 4000, CFG, solution=u)
    for row in cv.rows:
        assert abs(row.u_fd) <= 0.01 * fsup * (1 + 10 / 64)
        assert abs(row.u_mc) <= 0.01 * fsup + 3 * row.stderr
    assert cv.passed
