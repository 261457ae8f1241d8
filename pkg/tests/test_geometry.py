import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nonlocal_feller.errors import (
    AngleRangeViolation,
    DegenerateCorner,
    SignViolation,
    StructureError,
    WeightViolation,
)
from nonlocal_feller.geometry import (
    Arc,
    Coefficient,
    DomainSpec,
    NonlocalMap,
    OperatorCoefficients,
    PencilSystem,
    WeightProfile,
    compute_orbits,
    localize,
    quintic_cutoff_derivs,
    require_valid,
    validate_spec,
)
from nonlocal_feller.library import BUILTIN, square_nonlocal, unit_square, wedge, wedge_nonlocal

SQ = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def failed(report):
    return {c.error for c in report.failures()}


def corner_map(arc, corner, target, direction, weight=0.5, ratio=1.0):
    """Similarity sending SQ[corner] to SQ[target]; the arc's direction at the corner goes to ``direction``."""
    out = {(0, 0): 0.0, (1, 1): math.pi / 2, (2, 2): math.pi, (3, 3): -math.pi / 2,
           (0, 1): math.pi, (1, 2): -math.pi / 2, (2, 3): 0.0, (3, 0): math.pi / 2}[(arc, corner)]
    return NonlocalMap.similarity(arc, corner, SQ[corner], SQ[target], direction - out, ratio, WeightProfile(weight))


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_builtins_are_admissible(name):
    assert validate_spec(BUILTIN[name]()).ok


def test_plain_square_passes_every_check():
    rep = validate_spec(unit_square())
    assert rep.ok and all(c.passed for c in rep.checks)


def test_full_weight_on_both_sides_of_a_corner_is_rejected():
    maps = [corner_map(0, 0, 0, math.pi / 4, weight=1.0), corner_map(3, 0, 0, math.pi / 4, weight=1.0)]
    rep = validate_spec(unit_square(maps))
    assert "WeightViolation" in failed(rep)
    with pytest.raises(WeightViolation):
        require_valid(unit_square(maps))


def test_weights_above_one_on_an_arc_are_rejected():
    maps = [corner_map(0, 0, 0, math.pi / 4, 0.6), corner_map(0, 0, 0, math.pi / 8, 0.6)]
    assert "WeightViolation" in failed(validate_spec(unit_square(maps)))


def test_positive_potential_is_a_sign_violation():
    co = OperatorCoefficients(p0=Coefficient.constant(0.1))
    rep = validate_spec(unit_square(coefficients=co))
    assert failed(rep) == {"SignViolation"}
    with pytest.raises(SignViolation):
        require_valid(unit_square(coefficients=co))


def test_indefinite_principal_part_is_not_elliptic():
    co = OperatorCoefficients(p22=Coefficient.polynomial([0.5, -1.0]))  # p22 = 0.5 - x < 0 for x > 1/2
    assert "EllipticityViolation" in failed(validate_spec(unit_square(coefficients=co)))


def test_asymmetric_principal_part_is_rejected():
    co = OperatorCoefficients(p12=Coefficient.constant(0.1))
    assert "EllipticityViolation" in failed(validate_spec(unit_square(coefficients=co)))


def test_map_leaving_the_domain_is_rejected():
    m = corner_map(0, 0, 0, -math.pi / 8)
    assert "MapRangeViolation" in failed(validate_spec(unit_square([m])))


def test_non_conformal_corner_map_is_rejected():
    shear = NonlocalMap(0, 0, np.array([[1.0, 0.6], [0.3, 1.0]]), np.zeros(2), WeightProfile(0.5))
    assert "NonConformalCornerMap" in failed(validate_spec(unit_square([shear])))


def test_support_outside_the_corner_neighbourhood_is_rejected():
    m = NonlocalMap.similarity(0, 0, SQ[0], SQ[0], math.pi / 4, 1.0, WeightProfile(0.5, "constant", radius=0.6))
    assert "WeightViolation" in failed(validate_spec(unit_square([m])))


def test_flat_corner_is_rejected():
    v = [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    arcs = [Arc.segment(v[i], v[(i + 1) % 5]) for i in range(5)]
    spec = DomainSpec(arcs, np.array(v), [], OperatorCoefficients())
    assert "DegenerateCorner" in failed(validate_spec(spec))
    with pytest.raises(DegenerateCorner):
        require_valid(spec)


def test_open_boundary_is_a_structure_error():
    arcs = [Arc.segment(SQ[0], SQ[1]), Arc.segment(SQ[1], SQ[2]), Arc.segment(SQ[2], SQ[3])]
    with pytest.raises(StructureError):
        DomainSpec(arcs, np.array(SQ), [], OperatorCoefficients())


def test_validation_is_pure():
    spec = square_nonlocal()
    assert validate_spec(spec).to_json() == validate_spec(spec).to_json()


def test_orbits_without_maps_are_singletons():
    orbits = compute_orbits(unit_square())
    assert [o.corners for o in orbits] == [(0,), (1,), (2,), (3,)]


def test_one_map_joins_two_corners():
    m = corner_map(0, 0, 2, 5 * math.pi / 4)  # origin -> (1, 1), bottom side onto the diagonal
    spec = unit_square([m])
    assert validate_spec(spec).ok
    assert [o.corners for o in compute_orbits(spec)] == [(0, 2), (1,), (3,)]


def test_chain_of_maps_gives_one_orbit():
    maps = [corner_map(0, 0, 2, 5 * math.pi / 4), corner_map(1, 2, 3, -math.pi / 4)]
    spec = unit_square(maps)
    assert validate_spec(spec).ok
    assert [o.corners for o in compute_orbits(spec)] == [(0, 2, 3), (1,)]


MAP_POOL = [
    (0, 0, 2, 5 * math.pi / 4), (1, 2, 3, -math.pi / 4), (1, 1, 1, 3 * math.pi / 4),
    (2, 3, 0, math.pi / 4), (3, 3, 1, 3 * math.pi / 4), (2, 2, 2, 5 * math.pi / 4),
]


@given(st.lists(st.sampled_from(range(len(MAP_POOL))), unique=True, max_size=4))
def test_orbits_partition_the_corner_set(picks):
    spec = unit_square([corner_map(*MAP_POOL[i], weight=0.4) for i in picks])
    orbits = compute_orbits(spec)
    seen = [c for o in orbits for c in o.corners]
    assert sorted(seen) == list(range(4))
    for m in spec.maps:
        k = spec._corner_at(m(spec.corners[m.corner]))
        same = [o for o in orbits if m.corner in o.corners and k in o.corners]
        assert len(same) == 1


def test_square_corner_half_opening():
    sys = localize(unit_square(), compute_orbits(unit_square())[0])
    assert sys.half_openings == pytest.approx((math.pi / 4,), abs=1e-14)
    assert sys.all_zero


def test_rotation_homothety_becomes_a_pencil_term():
    spec = square_nonlocal(weight=0.3, rotation=math.pi / 6, ratio=0.8)
    sys = localize(spec, compute_orbits(spec)[0])
    (t,) = sys.side_terms(0, 1)
    assert (t.k, t.weight) == (0, pytest.approx(0.3, abs=1e-12))
    assert t.rotation == pytest.approx(math.pi / 6, abs=1e-12)
    assert t.ratio == pytest.approx(0.8, abs=1e-12)


def test_image_ray_outside_the_target_angle_is_rejected():
    with pytest.raises(AngleRangeViolation):
        PencilSystem.from_terms([math.pi / 4], [(0, 1, 0, 0.5, math.pi / 2 + 0.01, 1.0)]).check()


@given(st.floats(0.05, 1.0), st.floats(-0.7, 0.7), st.floats(0.6, 1.2))
def test_localize_round_trip(b, theta, chi):
    direct = PencilSystem.from_terms([math.pi / 4], [(0, 1, 0, b, math.pi / 4 + theta, chi)]).check()
    spec = square_nonlocal(weight=b, rotation=math.pi / 4 + theta, ratio=chi)
    loc = localize(spec, compute_orbits(spec)[0])
    (t,), (u,) = loc.side_terms(0, 1), direct.side_terms(0, 1)
    assert abs(loc.half_openings[0] - direct.half_openings[0]) < 1e-12
    assert abs(t.weight - u.weight) < 1e-12
    assert abs(t.rotation - u.rotation) < 1e-12
    assert abs(t.ratio - u.ratio) < 1e-12


def test_localized_weights_do_not_exceed_arc_weights():
    spec = wedge_nonlocal(weight=0.7)
    sys = localize(spec, compute_orbits(spec)[0])
    s = spec.arcs[0].sample(512)
    sup = max(spec.map_weight(m, s).max() for m in spec.maps)
    assert all(t.weight <= sup + 1e-15 for ts in sys.terms.values() for t in ts)


def test_reentrant_wedge_geometry():
    spec = wedge(0.75 * math.pi)
    info = spec.corner_info[0]
    assert info.half_opening == pytest.approx(0.75 * math.pi)
    assert spec.eps < spec.eps1


@given(st.floats(0.0, 1.0))
def test_quintic_cutoff_plateaus_and_derivatives(t):
    r = np.array([0.2 + 0.2 * t])
    xi, d1, d2 = quintic_cutoff_derivs(r, 0.2, 0.4)
    assert 0.0 <= xi[0] <= 1.0
    e = 1e-6
    xp, _, _ = quintic_cutoff_derivs(r + e, 0.2, 0.4)
    xm, _, _ = quintic_cutoff_derivs(r - e, 0.2, 0.4)
    assert d1[0] == pytest.approx((xp[0] - xm[0]) / (2 * e), abs=1e-5)
    xi0, _, _ = quintic_cutoff_derivs(np.array([0.1, 0.5]), 0.2, 0.4)
    assert list(xi0) == [1.0, 0.0]
