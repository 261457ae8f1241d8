"""Built-in domain specifications used by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import math

import numpy as np

from .geometry import Arc, DomainSpec, NonlocalMap, OperatorCoefficients, WeightProfile


def unit_square(maps=(), coefficients: OperatorCoefficients | None = None, name: str = "unit-square") -> DomainSpec:
    """[0, 1]^2 with its four vertices as corners (corner 0 at the origin)."""
    v = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    arcs = [Arc.segment(v[i], v[(i + 1) % 4]) for i in range(4)]
    return DomainSpec(arcs, np.array(v), list(maps), coefficients or OperatorCoefficients.laplacian(), name=name)


def square_nonlocal(weight: float = 0.5, rotation: float = math.pi / 4, ratio: float = 1.0,
                    profile: str = "bump", coefficients: OperatorCoefficients | None = None) -> DomainSpec:
    """Unit square with one map on the bottom side near the origin.

    The map rotates the bottom side about the origin by ``rotation`` (default: onto the
    diagonal) and scales by ``ratio``; its weight is ``weight`` near the origin.
    """
    m = NonlocalMap.similarity(0, 0, (0.0, 0.0), (0.0, 0.0), rotation, ratio, WeightProfile(weight, profile))
    return unit_square([m], coefficients, name="square-nonlocal")


def unit_disk(segments: int = 256, coefficients: OperatorCoefficients | None = None) -> DomainSpec:
    """Regular ``segments``-gon inscribed in the unit circle, centred at the origin, no corners."""
    arc = Arc.circle((0.0, 0.0), 1.0, 0.0, 2.0 * math.pi, segments)
    arc.points[-1] = arc.points[0]
    return DomainSpec([arc], np.zeros((0, 2)), [], coefficients or OperatorCoefficients.laplacian(), name="unit-disk")


def wedge(omega: float, radius: float = 1.0, segments: int = 192, maps=(), eps: float | None = None,
          coefficients: OperatorCoefficients | None = None, name: str = "wedge") -> DomainSpec:
    """Circular sector {r < radius, |arg y| < omega} with corner 0 at the origin.

    Arc 0 is the ray at angle -omega (the sigma = 1 side), arc 1 the circular part,
    arc 2 the ray at +omega.  The two ray/circle junctions are right-angle corners.
    """
    a = radius * np.array([math.cos(omega), -math.sin(omega)])
    b = radius * np.array([math.cos(omega), math.sin(omega)])
    n = max(8, int(round(segments * omega / math.pi)))
    circle = Arc.circle((0.0, 0.0), radius, -omega, omega, n)
    circle.points[0], circle.points[-1] = a, b
    arcs = [Arc.segment((0.0, 0.0), a), circle, Arc.segment(b, (0.0, 0.0))]
    corners = np.array([(0.0, 0.0), a, b])
    return DomainSpec(arcs, corners, list(maps), coefficients or OperatorCoefficients.laplacian(),
                      eps=eps, name=name)


def wedge_nonlocal(omega: float = 0.75 * math.pi, weight: float = 0.5, image_angle: float = 0.0,
                   ratio: float = 1.0, **kw) -> DomainSpec:
    """Wedge with a map on the -omega ray sending it to the ray at ``image_angle``."""
    m = NonlocalMap.similarity(0, 0, (0.0, 0.0), (0.0, 0.0), image_angle + omega, ratio, WeightProfile(weight))
    kw.setdefault("name", "wedge-nonlocal")
    return wedge(omega, maps=[m], **kw)


BUILTIN = {
    "unit-square": unit_square,
    "square-nonlocal": square_nonlocal,
    "unit-disk": unit_disk,
    "reentrant-wedge": lambda: wedge(0.75 * math.pi, name="reentrant-wedge"),
    "wedge-nonlocal": wedge_nonlocal,
}


def builtin(name: str) -> DomainSpec:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown built-in spec {name!r}; choose from {sorted(BUILTIN)}") from None
