import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonlocal_feller.errors import InsufficientRadii, StepTooCoarse
from nonlocal_feller.fdsolver import (
    BOUNDARY,
    CORNER,
    INTERIOR,
    assemble,
    build_grid,
    corner_decay_fit,
    corner_decay_profile,
    drift_threshold,
    solve_resolvent,
    verify_bounds,
)
from nonlocal_feller.geometry import OperatorCoefficients
from nonlocal_feller.library import square_nonlocal, unit_square, wedge_nonlocal
from nonlocal_feller.semigroup import random_smooth_field

from conftest import sine_mode

seeds = st.integers(0, 2**32 - 1)


def node_at(grid, x, y):
    hit = np.flatnonzero(np.all(np.abs(grid.nodes - (x, y)) < 1e-12, axis=1))
    assert hit.size == 1
    return int(hit[0])


def test_square_lattice_count(square_grid_64):
    g = square_grid_64
    assert g.n_interior == 63**2
    assert g.n_boundary == 4 * 63
    assert g.n_corner == 4
    assert sorted(map(tuple, g.nodes[g.corner_nodes])) == sorted(map(tuple, g.spec.corners))


def test_strong_drift_needs_a_finer_step():
    c = OperatorCoefficients.from_json({"principal": [[1, 0], [0, 1]], "drift": [1000, 0], "potential": 0})
    spec = unit_square(coefficients=c)
    assert drift_threshold(c, spec)[0] == pytest.approx(2e-3)
    with pytest.raises(StepTooCoarse):
        build_grid(spec, 1 / 64)
    assert build_grid(spec, 1 / 64, allow_upwind=True).upwind


def test_shallow_images_are_substituted_and_logged(caplog):
    with caplog.at_level(logging.INFO, logger="nonlocal_feller.fdsolver"):
        g = build_grid(square_nonlocal(rotation=0.02), 1 / 32)
    assert g.substitutions
    assert all(s["distance"] <= 3 * g.h for s in g.substitutions)
    assert "nearest interior cell" in caplog.text


def test_interior_row_is_the_five_point_laplacian(square_grid_64):
    g = square_grid_64
    s = assemble(g, g.spec.coefficients, 0.0)
    k = node_at(g, 0.5, 0.5)
    row = s.P[k]
    h = g.h
    assert row[0, k] == pytest.approx(-4 / h**2)
    assert sorted(row.data) == pytest.approx(sorted([-4 / h**2] + [1 / h**2] * 4))
    assert set(row.indices) == {k, *g.arms[k]}


def test_boundary_row_without_weight_is_dirichlet(nonlocal_grid_32):
    g = nonlocal_grid_32
    A = assemble(g, g.spec.coefficients, 1.0).A
    k = node_at(g, 0.5, 1.0)  # top side carries no map
    assert g.kind[k] == BOUNDARY
    assert A[k].indices.tolist() == [k] and A[k, k] == 1.0
    for c in g.corner_nodes:
        assert A[c].indices.tolist() == [c] and A[c, c] == 1.0


def test_image_at_a_cell_centre_gives_one_eighth_weights():
    h = 1 / 32
    # rotation onto the diagonal with ratio 0.75 sqrt 2 maps (2h, 0) to (1.5h, 1.5h)
    g = build_grid(square_nonlocal(ratio=0.75 * math.sqrt(2)), h)
    k = node_at(g, 2 * h, 0.0)
    A = assemble(g, g.spec.coefficients, 1.0).A
    off = {int(j): v for j, v in zip(A[k].indices, A[k].data) if j != k}
    assert A[k, k] == 1.0
    assert list(off.values()) == pytest.approx([-1 / 8] * 4)
    assert sorted(map(tuple, np.round(g.nodes[list(off)] / h))) == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_boundary_rows_have_nonnegative_row_sums(nonlocal_grid_64):
    g = nonlocal_grid_64
    A = assemble(g, g.spec.coefficients, 1.0).A
    b = g.boundary
    assert np.all(A.diagonal()[b] == 1.0)
    rows = A[b]
    assert np.all(np.asarray(rows.sum(axis=1)).ravel() >= 1 - g.weight_sum[b] - 1e-14)
    assert np.all(1 - g.weight_sum[b] >= 0)


def test_zero_data_give_zero(nonlocal_grid_32):
    s = assemble(nonlocal_grid_32, None, 1.0)
    u = solve_resolvent(s, 0.0, 0.0)
    assert u.sup == 0.0


@pytest.mark.parametrize("spec", [unit_square(), square_nonlocal(), wedge_nonlocal()], ids=lambda s: s.name)
def test_nonnegative_data_give_nonnegative_solutions(spec):
    g = build_grid(spec, 1 / 32)
    s = assemble(g, spec.coefficients, 1.0)
    u = solve_resolvent(s, 1.0)
    assert u.min >= -1e-8
    assert np.all(u.values[g.corner_nodes] == 0.0)
    A, rhs = s.A, s.rhs(1.0)
    assert np.max(np.abs(s.scale * (A @ u.values - rhs))) <= 1e-10 * (np.max(np.abs(s.scale * rhs)) + 1)


def test_q10_bound(nonlocal_grid_64):
    g = nonlocal_grid_64
    f = g.evaluate(lambda x, y: np.cos(3 * x) * np.sin(2 * y + 1))
    f /= np.max(np.abs(f[g.interior]))
    u = solve_resolvent(assemble(g, None, 10.0), f)
    rep = verify_bounds(u, f, 10.0)
    assert rep.bound_ok and u.sup <= 0.1 * (1 + 10 * g.h)


def test_doubling_q_halves_the_bound(nonlocal_grid_64):
    g = nonlocal_grid_64
    f = g.evaluate(sine_mode)
    u1 = solve_resolvent(assemble(g, None, 5.0), f)
    u2 = solve_resolvent(assemble(g, None, 10.0), f)
    r1, r2 = verify_bounds(u1, f, 5.0), verify_bounds(u2, f, 10.0)
    assert r1.bound_ok and r2.bound_ok
    assert u2.sup <= 0.5 * (r1.sup_f / 5.0) * (1 + r2.tol_h)
    assert u2.sup < u1.sup


def test_sine_mode_ratio_matches_the_discrete_eigenvalue(square_grid_64):
    # sin(pi x) sin(pi y) is an exact eigenvector of the five-point Laplacian
    g = square_grid_64
    h = g.h
    mu = 2 * (4 / h**2) * math.sin(math.pi * h / 2) ** 2
    f = g.evaluate(sine_mode)
    for q in (1.0, 5.0, 10.0):
        u = solve_resolvent(assemble(g, None, q), f)
        assert np.max(np.abs(u.values - f / (q + mu))) < 1e-12


def test_constant_data_fall_short_of_the_constant_supersolution(square_grid_64):
    g = square_grid_64
    c, q = 3.0, 2.0
    u = solve_resolvent(assemble(g, None, q), c)
    deficit = c / q - u.values
    assert np.all(deficit >= -1e-12)
    assert np.all(deficit[g.boundary] == pytest.approx(c / q)) and np.all(deficit[g.interior] > 0)


def test_verify_bounds_reports_a_witness(square_grid_64):
    g = square_grid_64
    u = g.field(2.0, 1.0)
    rep = verify_bounds(u, 1.0, 1.0)
    assert not rep.bound_ok and not rep.passed and rep.witness is not None
    assert rep.to_json()["contraction_ratio"] == pytest.approx(2.0)


@settings(max_examples=10)
@given(seeds)
def test_discrete_maximum_principle(nonlocal_grid_32, seed):
    g = nonlocal_grid_32
    rng = np.random.default_rng(seed)
    s = assemble(g, None, 1.0)
    assert s.mmatrix_ok
    f = -np.abs(random_smooth_field(g, rng))
    psi = rng.uniform(0.0, 1.0, g.n)
    u = solve_resolvent(s, f, psi)
    assert u.min >= min(0.0, psi[g.boundary].min()) - 1e-12


@settings(max_examples=10)
@given(seeds, st.floats(0.5, 20), st.floats(0.5, 20))
def test_resolvent_identity(nonlocal_grid_32, seed, q, p):
    g = nonlocal_grid_32
    f = random_smooth_field(g, np.random.default_rng(seed))
    Rq, Rp = assemble(g, None, q), assemble(g, None, p)
    uq, up = solve_resolvent(Rq, f).values, solve_resolvent(Rp, f).values
    rqp = solve_resolvent(Rq, up).values
    lhs, rhs = uq - up, (p - q) * rqp
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(np.max(np.abs(lhs)), np.max(np.abs(uq)))


@pytest.mark.parametrize("q", [1.0, 2.0, 5.0, 10.0, 50.0])
def test_contraction_sweep(nonlocal_grid_32, q):
    g = nonlocal_grid_32
    s = assemble(g, None, q)
    rng = np.random.default_rng(int(q))
    for _ in range(20):
        f = random_smooth_field(g, rng)
        u = solve_resolvent(s, f)
        assert q * u.sup / np.max(np.abs(f[g.interior])) <= 1 + 10 * g.h


def test_decay_is_linear_at_a_flat_boundary_point():
    h = 1 / 128
    g = build_grid(unit_square(), h)
    psi = np.where((g.kind == BOUNDARY) & (g.arc == 2), 1.0, 0.0)  # top side
    u = solve_resolvent(assemble(g, None, 1.0), 0.0, psi)
    assert corner_decay_fit(u, (0.5, 0.0), np.geomspace(4 * h, 0.2, 8)) == pytest.approx(1.0, abs=0.05)


def test_zero_field_has_no_decay_fit(square_grid_64):
    with pytest.raises(InsufficientRadii):
        corner_decay_profile(square_grid_64.field(0.0), 0, np.geomspace(0.05, 0.2, 6))


def test_node_classes_partition_the_grid(nonlocal_grid_64):
    g = nonlocal_grid_64
    assert set(np.unique(g.kind)) == {INTERIOR, BOUNDARY, CORNER}
    assert g.n == g.n_interior + g.n_boundary + g.n_corner
    assert np.all(g.arc[g.boundary] >= 0) and np.all(g.arc[g.interior] == -1)
