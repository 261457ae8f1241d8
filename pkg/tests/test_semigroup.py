import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonlocal_feller.errors import ContractionViolation, SpecError
from nonlocal_feller.fdsolver import INTERIOR, GridField, build_grid, project_to_CB, solve_resolvent
from nonlocal_feller.library import square_nonlocal, unit_square
from nonlocal_feller.semigroup import (
    backward_euler_step,
    boundary_maximum_witnesses,
    density_scheme,
    evolve,
    generic_cb_field,
    hille_iosida_checklist,
    random_smooth_field,
    resolvent_system,
)

from conftest import sine_mode

DT = 0.01
EIG = 2 * math.pi**2


@pytest.fixture(scope="module")
def sine_u0(square_grid_64):
    g = square_grid_64
    return GridField(g, project_to_CB(g, sine_mode), None, "u0")


def test_zero_stays_zero(nonlocal_grid_32):
    u = backward_euler_step(nonlocal_grid_32.field(0.0), DT)
    assert u.sup == 0.0


def test_one_step_on_the_eigenfunction(sine_u0):
    u1 = backward_euler_step(sine_u0, DT)
    assert u1.sup / sine_u0.sup == pytest.approx(1 / (1 + EIG * DT), abs=0.02)


def test_ten_steps_on_the_eigenfunction(sine_u0):
    log = evolve(sine_u0, 10 * DT, 10)
    want = (1 + EIG * DT) ** -10
    assert log.sup[-1] / log.sup[0] == pytest.approx(want, rel=0.05)
    assert log.contraction_ok and log.positivity_ok and log.steps == 10


def test_random_nonnegative_step_stays_nonnegative(nonlocal_grid_32):
    g = nonlocal_grid_32
    rng = np.random.default_rng(3)
    for _ in range(5):
        u0 = GridField(g, project_to_CB(g, random_smooth_field(g, rng, nonnegative=True)))
        assert backward_euler_step(u0, DT).min >= -1e-8


def test_clipped_one_decays_strictly(square_grid_64):
    g = square_grid_64
    u0 = GridField(g, project_to_CB(g, 1.0))
    log = evolve(u0, 0.2, 20)
    assert all(b < a for a, b in zip(log.sup, log.sup[1:]))
    assert log.positivity_ok


def test_zero_steps_is_the_identity(sine_u0):
    log = evolve(sine_u0, 0.0, 0)
    assert log.steps == 0 and log.final is sine_u0


def test_growth_is_reported(square_grid_64, monkeypatch):
    import nonlocal_feller.semigroup as sg

    g = square_grid_64
    u0 = GridField(g, project_to_CB(g, sine_mode))
    monkeypatch.setattr(sg, "backward_euler_step", lambda u, dt, system=None: u.with_values(2 * u.values))
    with pytest.raises(ContractionViolation):
        sg.evolve(u0, 0.1, 2)
    assert not sg.evolve(u0, 0.1, 2, strict=False).contraction_ok


@settings(max_examples=5)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_semigroup_property(seed, n):
    g = build_grid(square_nonlocal(), 1 / 32)
    u0 = GridField(g, project_to_CB(g, np.abs(random_smooth_field(g, np.random.default_rng(seed)))))
    whole = evolve(u0, 2 * n * DT, 2 * n).final.values
    half = evolve(evolve(u0, n * DT, n).final, n * DT, n).final.values
    assert np.array_equal(whole, half)


def test_contraction_and_positivity_over_steps(nonlocal_grid_64):
    g = nonlocal_grid_64
    u0 = GridField(g, project_to_CB(g, np.abs(random_smooth_field(g, np.random.default_rng(11)))))
    log = evolve(u0, 0.5, 25)
    assert all(b <= a * (1 + 10 * g.h) for a, b in zip(log.sup, log.sup[1:]))
    assert min(log.minimum) >= -1e-8


def test_density_scheme_errors_vanish_for_zero(nonlocal_grid_32):
    d = density_scheme(nonlocal_grid_32.field(0.0), 0.1)
    assert d.errors == [0.0] * 4 and d.smoothing_error == 0.0 and d.passed


def test_yosida_errors_halve_when_lambda_doubles(nonlocal_grid_64):
    g = nonlocal_grid_64
    d = density_scheme(generic_cb_field(g, np.random.default_rng(0)), 0.1, 1.0, (1000.0, 2000.0, 4000.0))
    y = d.yosida_errors
    assert all(a / b >= 1.8 for a, b in zip(y, y[1:]))


def test_density_scheme_on_a_generic_field(nonlocal_grid_64):
    g = nonlocal_grid_64
    d = density_scheme(generic_cb_field(g, np.random.default_rng(1)), 0.1)
    assert d.monotone and d.errors[-1] <= 0.3 and d.passed


def test_checklist_passes_on_the_square_with_a_map():
    r = hille_iosida_checklist(square_nonlocal(), 1 / 64)
    assert r.passed and r.contraction_ok and r.positivity_ok and r.density_ok
    assert all(r.contraction[q] <= 1 + r.tol_h for q in (1.0, 10.0, 100.0))
    assert r.to_json()["passed"] is True
    assert "generator checks passed" in r.summary()


def test_checklist_rejects_inadmissible_weights():
    with pytest.raises(SpecError):
        hille_iosida_checklist(square_nonlocal(weight=1.3), 1 / 32)


def test_cached_systems_are_reused(nonlocal_grid_32):
    assert resolvent_system(nonlocal_grid_32, 7.0) is resolvent_system(nonlocal_grid_32, 7.0)


def test_boundary_maximum_is_repeated_inside():
    # unit weight near the origin: a field with a plateau over the images
    spec = square_nonlocal(weight=1.0)
    g = build_grid(spec, 1 / 32)
    plateau = lambda x, y: np.where(np.hypot(x, y) < 0.3, 1.0, 0.5)
    u = GridField(g, project_to_CB(g, plateau))
    wit = boundary_maximum_witnesses(u)
    assert wit and all(v is not None and g.kind[v] == INTERIOR for v in wit.values())
    for k, v in wit.items():
        assert u.values[v] == pytest.approx(u.values[k]) == pytest.approx(u.sup)


def test_boundary_maximum_on_solver_outputs(nonlocal_grid_64):
    g = nonlocal_grid_64
    rng = np.random.default_rng(5)
    s = resolvent_system(g, 1.0)
    for _ in range(5):
        u = solve_resolvent(s, random_smooth_field(g, rng, nonnegative=True))
        assert all(v is not None for v in boundary_maximum_witnesses(u).values())
