"""Plane domains with corners, atomic nonlocal maps and operator coefficients.

A domain is a counter-clockwise closed chain of polyline arcs; arcs meet at the
corner set.  Each nonlocal map is attached to one arc and localized at one corner
of that arc, where its weight profile is supported.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AngleRangeViolation,
    DegenerateCorner,
    EllipticityViolation,
    MapRangeViolation,
    NeighborhoodViolation,
    NonConformalCornerMap,
    NonIsotropicCorner,
    SignViolation,
    StructureError,
    WeightViolation,
)

CONFORMAL_RTOL = 1e-9
_SNAP = 1e-10


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


def quintic_cutoff(r, inner: float, outer: float):
    """C^2 radial cutoff: 1 for r <= inner, 0 for r >= outer."""
    r = np.asarray(r, dtype=float)
    t = np.clip((r - inner) / (outer - inner), 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def quintic_cutoff_derivs(r, inner: float, outer: float):
    """Return (xi, xi', xi'') of :func:`quintic_cutoff` with respect to r."""
    r = np.asarray(r, dtype=float)
    width = outer - inner
    t = np.clip((r - inner) / width, 0.0, 1.0)
    xi = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    d1 = -30.0 * t**2 * (1.0 - t) ** 2 / width
    d2 = -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t) / width**2
    return xi, d1, d2


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class Coefficient:
    """Polynomial of degree at most two in (x, y).

    ``terms`` holds the table ``(c, c_x, c_y, c_xx, c_xy, c_yy)``.
    """

    terms: tuple[float, float, float, float, float, float] = (0.0,) * 6

    @classmethod
    def constant(cls, value: float) -> "Coefficient":
        return cls((float(value), 0.0, 0.0, 0.0, 0.0, 0.0))

    @classmethod
    def polynomial(cls, terms: Sequence[float]) -> "Coefficient":
        t = [float(v) for v in terms]
        if len(t) > 6:
            raise ValueError("polynomial coefficients support degree <= 2 (at most 6 terms)")
        return cls(tuple(t + [0.0] * (6 - len(t))))

    @property
    def is_constant(self) -> bool:
        return all(v == 0.0 for v in self.terms[1:])

    def __call__(self, x, y):
        c, cx, cy, cxx, cxy, cyy = self.terms
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return c + cx * x + cy * y + cxx * x * x + cxy * x * y + cyy * y * y + 0.0 * (x + y)

    def to_json(self):
        if self.is_constant:
            return self.terms[0]
        return {"polynomial": list(self.terms)}

    @classmethod
    def from_json(cls, obj) -> "Coefficient":
        if isinstance(obj, (int, float)):
            return cls.constant(obj)
        if "constant" in obj:
            return cls.constant(obj["constant"])
        return cls.polynomial(obj["polynomial"])


_ZERO = Coefficient()
_ONE = Coefficient.constant(1.0)


@dataclass(frozen=True)
class OperatorCoefficients:
    """Coefficients of P u = sum p_jk u_jk + sum p_j u_j + p_0 u."""

    p11: Coefficient = _ONE
    p12: Coefficient = _ZERO
    p21: Coefficient = _ZERO
    p22: Coefficient = _ONE
    p1: Coefficient = _ZERO
    p2: Coefficient = _ZERO
    p0: Coefficient = _ZERO
    c0: float | None = None

    @classmethod
    def laplacian(cls) -> "OperatorCoefficients":
        return cls()

    @property
    def is_laplacian(self) -> bool:
        return self == OperatorCoefficients(c0=self.c0)

    @property
    def has_drift(self) -> bool:
        return self.p1 != _ZERO or self.p2 != _ZERO

    def principal(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.empty(x.shape + (2, 2))
        a[..., 0, 0] = self.p11(x, y)
        a[..., 0, 1] = self.p12(x, y)
        a[..., 1, 0] = self.p21(x, y)
        a[..., 1, 1] = self.p22(x, y)
        return a

    def drift(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([self.p1(x, y), self.p2(x, y)], axis=-1)

    def potential(self, x, y):
        return self.p0(x, y)

    def to_json(self) -> dict:
        out = {
            "principal": [[self.p11.to_json(), self.p12.to_json()], [self.p21.to_json(), self.p22.to_json()]],
            "drift": [self.p1.to_json(), self.p2.to_json()],
            "potential": self.p0.to_json(),
        }
        if self.c0 is not None:
            out["c0"] = self.c0
        return out

    @classmethod
    def from_json(cls, obj: dict | None) -> "OperatorCoefficients":
        if not obj:
            return cls()
        pr = obj.get("principal", [[1.0, 0.0], [0.0, 1.0]])
        dr = obj.get("drift", [0.0, 0.0])
        f = Coefficient.from_json
        return cls(
            p11=f(pr[0][0]), p12=f(pr[0][1]), p21=f(pr[1][0]), p22=f(pr[1][1]),
            p1=f(dr[0]), p2=f(dr[1]), p0=f(obj.get("potential", 0.0)), c0=obj.get("c0"),
        )


# ---------------------------------------------------------------------------
# polygon helpers


class Polygon:
    """Closed polygon with vectorised containment and distance queries."""

    def __init__(self, vertices: np.ndarray):
        self.v = np.asarray(vertices, dtype=float)
        self.a = self.v
        self.b = np.roll(self.v, -1, axis=0)
        self.d = self.b - self.a
        self.len2 = np.einsum("ij,ij->i", self.d, self.d)

    @property
    def n_edges(self) -> int:
        return len(self.a)

    def signed_area(self) -> float:
        x, y = self.a[:, 0], self.a[:, 1]
        return 0.5 * float(np.sum(x * self.b[:, 1] - self.b[:, 0] * y))

    def _chunks(self, n: int):
        step = max(1, int(4_000_000 // max(self.n_edges, 1)))
        for s in range(0, n, step):
            yield slice(s, min(n, s + step))

    def contains(self, pts) -> np.ndarray:
        """Crossing-number test (boundary points may land either way)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.empty(len(pts), dtype=bool)
        ax, ay, bx, by = self.a[:, 0], self.a[:, 1], self.b[:, 0], self.b[:, 1]
        for sl in self._chunks(len(pts)):
            px = pts[sl, 0:1]
            py = pts[sl, 1:2]
            cond = (ay > py) != (by > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = ax + (py - ay) * (bx - ax) / (by - ay)
            out[sl] = (np.count_nonzero(cond & (px < xint), axis=1) % 2) == 1
        return out

    def distance(self, pts):
        """Distance to the boundary, nearest edge index and foot point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        dist = np.empty(len(pts))
        edge = np.empty(len(pts), dtype=int)
        foot = np.empty_like(pts)
        for sl in self._chunks(len(pts)):
            p = pts[sl, None, :]
            t = np.einsum("nej,ej->ne", p - self.a[None], self.d) / self.len2
            t = np.clip(t, 0.0, 1.0)
            proj = self.a[None] + t[..., None] * self.d[None]
            d2 = np.sum((p - proj) ** 2, axis=-1)
            k = np.argmin(d2, axis=1)
            rows = np.arange(len(k))
            dist[sl] = np.sqrt(d2[rows, k])
            edge[sl] = k
            foot[sl] = proj[rows, k]
        return dist, edge, foot

    def signed_distance(self, pts) -> np.ndarray:
        """Positive inside, negative outside."""
        dist, _, _ = self.distance(pts)
        inside = self.contains(pts)
        return np.where(inside, dist, -dist)

    def first_crossing(self, p0, p1):
        """Smallest t in (0, 1] where p0 + t (p1 - p0) meets the boundary (inf if none)."""
        p0 = np.atleast_2d(np.asarray(p0, dtype=float))
        p1 = np.atleast_2d(np.asarray(p1, dtype=float))
        r = p1 - p0
        best = np.full(len(p0), np.inf)
        best_edge = np.full(len(p0), -1)
        for sl in self._chunks(len(p0)):
            rr = r[sl, None, :]
            qa = self.a[None] - p0[sl, None, :]
            den = rr[..., 0] * self.d[None, :, 1] - rr[..., 1] * self.d[None, :, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (qa[..., 0] * self.d[None, :, 1] - qa[..., 1] * self.d[None, :, 0]) / den
                s = (qa[..., 0] * rr[..., 1] - qa[..., 1] * rr[..., 0]) / den
            ok = (np.abs(den) > 1e-300) & (t > 1e-12) & (t <= 1.0 + 1e-12) & (s >= -1e-12) & (s <= 1.0 + 1e-12)
            t = np.where(ok, t, np.inf)
            k = np.argmin(t, axis=1)
            rows = np.arange(len(k))
            best[sl] = t[rows, k]
            best_edge[sl] = np.where(np.isfinite(t[rows, k]), k, -1)
        return best, best_edge


# ---------------------------------------------------------------------------
# arcs, maps, weights


@dataclass
class Arc:
    """Polyline boundary arc, traversed with the domain on its left."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise StructureError("an arc needs at least two 2-D points")

    @classmethod
    def segment(cls, p, q) -> "Arc":
        return cls(np.array([p, q], dtype=float))

    @classmethod
    def circle(cls, center, radius: float, start: float, end: float, segments: int) -> "Arc":
        t = np.linspace(start, end, segments + 1)
        c = np.asarray(center, dtype=float)
        return cls(c + radius * np.column_stack([np.cos(t), np.sin(t)]))

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    @cached_property
    def cumlength(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def sample(self, m: int, include_ends: bool = True) -> np.ndarray:
        """m points equally spaced in arclength."""
        s = np.linspace(0.0, self.cumlength[-1], m)
        if not include_ends:
            s = s[1:-1]
        x = np.interp(s, self.cumlength, self.points[:, 0])
        y = np.interp(s, self.cumlength, self.points[:, 1])
        return np.column_stack([x, y])

    def to_json(self) -> dict:
        return {"points": self.points.tolist()}


@dataclass(frozen=True)
class WeightProfile:
    """Radial weight b(y) = value * shape(|y - g|) about the map's corner g.

    ``bump``: quintic cutoff, equal to ``value`` for r <= radius/2, zero for r >= radius.
    ``constant``: ``value`` for r < radius, zero otherwise.
    """

    value: float
    kind: str = "bump"
    radius: float | None = None

    def __call__(self, r):
        if self.radius is None:
            raise ValueError("weight profile radius unresolved (attach it to a DomainSpec)")
        r = np.asarray(r, dtype=float)
        if self.kind == "bump":
            return self.value * quintic_cutoff(r, 0.5 * self.radius, self.radius)
        if self.kind == "constant":
            return np.where(r < self.radius, self.value, 0.0)
        raise ValueError(f"unknown weight profile {self.kind!r}")

    def to_json(self) -> dict:
        out = {"profile": self.kind, "value": self.value}
        if self.radius is not None:
            out["radius"] = self.radius
        return out

    @classmethod
    def from_json(cls, obj) -> "WeightProfile":
        if isinstance(obj, (int, float)):
            return cls(float(obj))
        return cls(float(obj["value"]), obj.get("profile", "bump"), obj.get("radius"))


@dataclass
class NonlocalMap:
    """Affine map y -> A y + t attached to ``arc`` and localized at corner index ``corner``."""

    arc: int
    corner: int
    matrix: np.ndarray
    offset: np.ndarray
    weight: WeightProfile

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(2, 2)
        self.offset = np.asarray(self.offset, dtype=float).reshape(2)

    @classmethod
    def similarity(cls, arc: int, corner: int, corner_point, target_point, rotation: float,
                   ratio: float, weight: WeightProfile) -> "NonlocalMap":
        """Rotation by ``rotation`` (global frame) and homothety ``ratio`` taking corner to target."""
        c, s = math.cos(rotation), math.sin(rotation)
        a = ratio * np.array([[c, -s], [s, c]])
        offset = np.asarray(target_point, dtype=float) - a @ np.asarray(corner_point, dtype=float)
        return cls(arc, corner, a, offset, weight)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.matrix.T + self.offset

    def to_json(self) -> dict:
        return {
            "arc": self.arc,
            "corner": self.corner,
            "affine": {"matrix": self.matrix.tolist(), "offset": self.offset.tolist()},
            "weight": self.weight.to_json(),
        }


@dataclass(frozen=True)
class CornerInfo:
    index: int
    point: tuple[float, float]
    half_opening: float
    bisector: float
    out_arc: int  # side at local angle -omega (sigma = 1)
    in_arc: int  # side at local angle +omega (sigma = 2)

    def to_local(self, pts) -> np.ndarray:
        """Complex local coordinates: shift to the corner, bisector along +x."""
        pts = np.asarray(pts, dtype=float)
        z = (pts[..., 0] - self.point[0]) + 1j * (pts[..., 1] - self.point[1])
        return z * cmath.exp(-1j * self.bisector)

    def from_local(self, z) -> np.ndarray:
        w = np.asarray(z) * cmath.exp(1j * self.bisector)
        return np.stack([w.real + self.point[0], w.imag + self.point[1]], axis=-1)


# ---------------------------------------------------------------------------
# domain


@dataclass
class DomainSpec:
    arcs: list[Arc]
    corners: np.ndarray
    maps: list[NonlocalMap] = field(default_factory=list)
    coefficients: OperatorCoefficients = field(default_factory=OperatorCoefficients)
    eps: float | None = None
    eps1: float | None = None
    samples_per_arc: int = 256
    name: str = "domain"

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=float).reshape(-1, 2)
        self._check_structure()
        if self.eps1 is None:
            self.eps1 = self._default_eps1()
        if self.eps is None:
            self.eps = 0.5 * self.eps1
        resolved = []
        for m in self.maps:
            if m.weight.radius is None:
                m = replace(m, weight=replace(m.weight, radius=0.95 * self.eps))
            resolved.append(m)
        self.maps = resolved

    # structure ---------------------------------------------------------------
    def _corner_at(self, p) -> int:
        if len(self.corners) == 0:
            return -1
        d = np.linalg.norm(self.corners - p, axis=1)
        k = int(np.argmin(d))
        return k if d[k] <= _SNAP * max(1.0, self.diameter) else -1

    def _check_structure(self):
        n = len(self.arcs)
        if n == 0:
            raise StructureError("domain has no arcs")
        scale = _SNAP * max(1.0, self.diameter)
        for i in range(n):
            nxt = self.arcs[(i + 1) % n]
            if np.linalg.norm(self.arcs[i].end - nxt.start) > scale:
                raise StructureError(f"arc {i} does not end where arc {(i + 1) % n} starts")
        if len(self.corners) == 0:
            if n != 1:
                raise StructureError("arcs may only meet at corners; give the junctions as corners")
        else:
            for i, arc in enumerate(self.arcs):
                if self._corner_at(arc.start) < 0:
                    raise StructureError(f"arc {i} starts at a point that is not a corner", arc.start)
            ends = {self._corner_at(a.start) for a in self.arcs}
            for k, c in enumerate(self.corners):
                if k not in ends:
                    raise StructureError(f"corner {k} is not an arc endpoint", c)
        if self.polygon.signed_area() <= 0:
            raise StructureError("boundary must be traversed counter-clockwise")
        for m in self.maps:
            if not (0 <= m.arc < n) or not (0 <= m.corner < len(self.corners)):
                raise StructureError("map references a missing arc or corner")
            arc = self.arcs[m.arc]
            if m.corner not in (self._corner_at(arc.start), self._corner_at(arc.end)):
                raise StructureError(f"map on arc {m.arc} is localized at corner {m.corner}, not an arc endpoint")

    @cached_property
    def diameter(self) -> float:
        pts = np.concatenate([a.points for a in self.arcs])
        return float(np.max(np.ptp(pts, axis=0)) * math.sqrt(2.0))

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.concatenate([a.points[:-1] for a in self.arcs])

    @cached_property
    def edge_arc(self) -> np.ndarray:
        """Arc index of every polygon edge."""
        return np.concatenate([np.full(len(a.points) - 1, i) for i, a in enumerate(self.arcs)])

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(self.boundary_vertices)

    def _default_eps1(self) -> float:
        if len(self.corners) == 0:
            return 0.25 * self.diameter
        cands = []
        if len(self.corners) > 1:
            d = np.linalg.norm(self.corners[:, None] - self.corners[None], axis=-1)
            cands.append(0.5 * float(np.min(d[np.triu_indices(len(self.corners), 1)])))
        poly = self.polygon
        for k, c in enumerate(self.corners):
            # distance to the arcs that do not end at this corner
            incident = [i for i, a in enumerate(self.arcs) if k in (self._corner_at(a.start), self._corner_at(a.end))]
            far = ~np.isin(self.edge_arc, incident)
            if not np.any(far):
                continue
            a, b = poly.a[far], poly.b[far]
            d = b - a
            t = np.clip(np.einsum("ij,ij->i", c - a, d) / np.einsum("ij,ij->i", d, d), 0, 1)
            cands.append(0.5 * float(np.min(np.linalg.norm(a + t[:, None] * d - c, axis=1))))
        return min(cands)

    # corners -----------------------------------------------------------------
    @cached_property
    def corner_info(self) -> list[CornerInfo]:
        out = []
        for k, g in enumerate(self.corners):
            out_arc = next(i for i, a in enumerate(self.arcs) if self._corner_at(a.start) == k)
            in_arc = next(i for i, a in enumerate(self.arcs) if self._corner_at(a.end) == k)
            d_out = self.arcs[out_arc].points[1] - g
            d_in = g - self.arcs[in_arc].points[-2]
            a_out = math.atan2(d_out[1], d_out[0])
            a_back = math.atan2(-d_in[1], -d_in[0])
            opening = (a_back - a_out) % (2.0 * math.pi)
            omega = 0.5 * opening
            out.append(CornerInfo(k, (float(g[0]), float(g[1])), omega, wrap_angle(a_out + omega), out_arc, in_arc))
        return out

    def corner_distance(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Distance to the nearest corner and its index."""
        pts = np.atleast_2d(pts)
        if len(self.corners) == 0:
            return np.full(len(pts), np.inf), np.full(len(pts), -1)
        d = np.linalg.norm(pts[:, None, :] - self.corners[None], axis=-1)
        k = np.argmin(d, axis=1)
        return d[np.arange(len(pts)), k], k

    def maps_on_arc(self, i: int) -> list[NonlocalMap]:
        return [m for m in self.maps if m.arc == i]

    def map_weight(self, m: NonlocalMap, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return m.weight(np.linalg.norm(pts - self.corners[m.corner], axis=1))

    def boundary_weights(self, arc: int, pts) -> list[tuple[NonlocalMap, np.ndarray]]:
        return [(m, self.map_weight(m, pts)) for m in self.maps_on_arc(arc)]

    def contains(self, pts) -> np.ndarray:
        return self.polygon.contains(pts)

    def sample_interior(self, n: int = 48) -> np.ndarray:
        lo = self.boundary_vertices.min(axis=0)
        hi = self.boundary_vertices.max(axis=0)
        xs = np.linspace(lo[0], hi[0], n + 2)[1:-1]
        ys = np.linspace(lo[1], hi[1], n + 2)[1:-1]
        pts = np.array(np.meshgrid(xs, ys)).reshape(2, -1).T
        return pts[self.contains(pts)]


# ---------------------------------------------------------------------------
# validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: str | None = None
    detail: str = ""
    witness: list[float] | None = None
    severity: str = "error"

    def to_json(self) -> dict:
        return {
            "name": self.name, "passed": self.passed, "error": self.error,
            "detail": self.detail, "witness": self.witness, "severity": self.severity,
        }


_ERRORS = {
    "EllipticityViolation": EllipticityViolation,
    "SignViolation": SignViolation,
    "WeightViolation": WeightViolation,
    "MapRangeViolation": MapRangeViolation,
    "NonConformalCornerMap": NonConformalCornerMap,
    "NeighborhoodViolation": NeighborhoodViolation,
    "DegenerateCorner": DegenerateCorner,
    "NonIsotropicCorner": NonIsotropicCorner,
}


@dataclass
class ValidationReport:
    spec_name: str
    checks: list[CheckResult]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks if c.severity == "error")

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed and c.severity == "error"]

    def raise_for_failures(self):
        fails = self.failures()
        if fails:
            c = fails[0]
            raise _ERRORS[c.error](f"{c.name}: {c.detail}", c.witness)

    def to_json(self) -> dict:
        return {"spec": self.spec_name, "ok": self.ok, "checks": [c.to_json() for c in self.checks]}


def _witness(p) -> list[float]:
    return [float(v) for v in np.ravel(p)]


def _fit_corner_map(spec: DomainSpec, m: NonlocalMap):
    """Fit the corner-localized map to z -> c z; return (c, relative residual, target index)."""
    info_j = spec.corner_info[m.corner]
    g_img = m(np.asarray(info_j.point))
    k = spec._corner_at(g_img)
    if k < 0:
        return None, math.inf, -1
    info_k = spec.corner_info[k]
    r = np.linspace(0.05, 1.0, 12) * spec.eps
    a = np.linspace(-info_j.half_opening, info_j.half_opening, 13)
    z = (r[:, None] * np.exp(1j * a[None, :])).ravel()
    img = info_k.to_local(m(info_j.from_local(z)))
    c = complex(np.vdot(z, img) / np.vdot(z, z))
    resid = float(np.max(np.abs(img - c * z)) / max(np.max(np.abs(img)), 1e-300))
    return c, resid, k


def validate_spec(spec: DomainSpec) -> ValidationReport:
    """Check ellipticity, sign, weight, map-range and corner-map conditions by sampling."""
    checks: list[CheckResult] = []
    co = spec.coefficients
    bpts = np.concatenate([a.sample(spec.samples_per_arc) for a in spec.arcs])
    pts = np.concatenate([spec.sample_interior(), bpts])
    x, y = pts[:, 0], pts[:, 1]

    asym = np.abs(co.p12(x, y) - co.p21(x, y))
    i = int(np.argmax(asym))
    checks.append(CheckResult("principal part symmetric", bool(asym[i] <= 1e-12), "EllipticityViolation",
                              f"max |p12 - p21| = {asym[i]:.3g}", _witness(pts[i])))

    a = co.principal(x, y)
    lam = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))[:, 0]
    i = int(np.argmin(lam))
    c0 = co.c0 if co.c0 is not None else float(lam[i])
    ok = c0 > 0 and lam[i] >= c0 - 1e-12
    checks.append(CheckResult("uniform ellipticity", bool(ok), "EllipticityViolation",
                              f"min eigenvalue {lam[i]:.6g}, c0 = {c0:.6g}", _witness(pts[i])))

    p0 = co.p0(x, y)
    i = int(np.argmax(p0))
    checks.append(CheckResult("p0 <= 0", bool(p0[i] <= 0.0), "SignViolation",
                              f"max p0 = {p0[i]:.6g}", _witness(pts[i])))

    # eq. (4-5): nonnegativity and partial sums on every arc
    worst = (True, "", None)
    for ia, arc in enumerate(spec.arcs):
        s = arc.sample(spec.samples_per_arc)
        total = np.zeros(len(s))
        for m, w in spec.boundary_weights(ia, s):
            if np.any(w < 0):
                j = int(np.argmin(w))
                worst = (False, f"b < 0 on arc {ia}", s[j])
            total += w
        j = int(np.argmax(total)) if len(total) else 0
        if total.size and total[j] > 1.0 + 1e-12 and worst[0]:
            worst = (False, f"sum of weights {total[j]:.6g} > 1 on arc {ia}", s[j])
    checks.append(CheckResult("weights nonnegative, sum <= 1", worst[0], "WeightViolation",
                              worst[1], None if worst[2] is None else _witness(worst[2])))

    # eq. (6): two-side total at each corner
    ok, detail, wit = True, "", None
    for info in spec.corner_info:
        g = np.asarray(info.point)[None]
        tot = sum(float(spec.map_weight(m, g)[0]) for arc in (info.out_arc, info.in_arc)
                  for m in spec.maps_on_arc(arc))
        if info.out_arc == info.in_arc:
            tot = 2.0 * sum(float(spec.map_weight(m, g)[0]) for m in spec.maps_on_arc(info.out_arc))
        if tot >= 2.0 and ok:
            ok, detail, wit = False, f"two-side weight total {tot:.6g} at corner {info.index} is not < 2", info.point
    checks.append(CheckResult("corner weight total < 2", ok, "WeightViolation", detail,
                              None if wit is None else _witness(wit)))

    # support within O_eps(K)
    ok, detail, wit = True, "", None
    for ia, arc in enumerate(spec.arcs):
        s = arc.sample(spec.samples_per_arc)
        dk, _ = spec.corner_distance(s)
        for m, w in spec.boundary_weights(ia, s):
            bad = (dk >= spec.eps) & (w != 0)
            if np.any(bad) and ok:
                ok, detail, wit = False, f"weight of map on arc {ia} nonzero outside O_eps(K)", s[np.argmax(bad)]
    checks.append(CheckResult("supp b within O_eps(K)", ok, "WeightViolation", detail,
                              None if wit is None else _witness(wit)))

    # corners and neighbourhoods
    ok, detail, wit = True, "", None
    for info in spec.corner_info:
        if not (0.0 < info.half_opening < math.pi) or abs(info.half_opening - 0.5 * math.pi) < 1e-12:
            ok, detail, wit = False, f"corner {info.index}: opening {2 * info.half_opening:.6g} rejected", info.point
            break
    checks.append(CheckResult("corner openings in (0, 2pi), != pi", ok, "DegenerateCorner", detail,
                              None if wit is None else _witness(wit)))

    ok = spec.eps < spec.eps1
    detail = f"eps = {spec.eps:.6g}, eps1 = {spec.eps1:.6g}"
    if ok and len(spec.corners) > 1:
        d = np.linalg.norm(spec.corners[:, None] - spec.corners[None], axis=-1)
        dmin = float(np.min(d[np.triu_indices(len(spec.corners), 1)]))
        ok = 2.0 * spec.eps1 <= dmin * (1 + 1e-12)
        detail += f", min corner distance {dmin:.6g}"
    checks.append(CheckResult("eps < eps1, neighbourhoods disjoint", bool(ok), "NeighborhoodViolation", detail))

    # map ranges and condition 2
    ok_r, det_r, wit_r = True, "", None
    ok_c, det_c, wit_c = True, "", None
    for m in spec.maps:
        arc = spec.arcs[m.arc]
        s = arc.sample(4 * spec.samples_per_arc)
        w = spec.map_weight(m, s)
        act = s[w > 0]
        c, resid, k = _fit_corner_map(spec, m)
        if k < 0:
            if ok_r:
                ok_r, det_r, wit_r = False, f"map on arc {m.arc} does not send corner {m.corner} to a corner", spec.corners[m.corner]
            continue
        # drop the corner itself: it is mapped onto the boundary by design
        dg = np.linalg.norm(act - spec.corners[m.corner], axis=1)
        act = act[dg > 1e-9 * spec.diameter]
        if len(act):
            img = m(act)
            dist, _, _ = spec.polygon.distance(img)
            inside = spec.contains(img) & (dist > 1e-12 * spec.diameter)
            if not np.all(inside) and ok_r:
                ok_r, det_r, wit_r = False, f"map on arc {m.arc} sends a point outside G", act[np.argmin(inside)]
        if abs(c) * spec.eps >= spec.eps1 and ok_r:
            ok_r, det_r, wit_r = False, f"map on arc {m.arc}: image of O_eps leaves O_eps1", spec.corners[m.corner]
        if resid > CONFORMAL_RTOL and ok_c:
            ok_c, det_c, wit_c = False, f"map on arc {m.arc}: residual {resid:.3g} against rotation-homothety", spec.corners[m.corner]
    checks.append(CheckResult("maps send O_eps(K) ∩ arcs into G, corners to corners", ok_r, "MapRangeViolation",
                              det_r, None if wit_r is None else _witness(wit_r)))
    checks.append(CheckResult("corner maps are rotation-homothety", ok_c, "NonConformalCornerMap", det_c,
                              None if wit_c is None else _witness(wit_c)))

    ok, detail, wit = True, "", None
    for info in spec.corner_info:
        p = co.principal(np.array([info.point[0]]), np.array([info.point[1]]))[0]
        if abs(p[0, 1]) > 1e-9 * abs(p[0, 0]) or abs(p[0, 0] - p[1, 1]) > 1e-9 * abs(p[0, 0]):
            ok, detail, wit = False, f"principal part at corner {info.index} is not a multiple of the Laplacian", info.point
            break
    checks.append(CheckResult("isotropic principal part at corners", ok, "NonIsotropicCorner", detail,
                              None if wit is None else _witness(wit), severity="warning"))
    return ValidationReport(spec.name, checks)


def require_valid(spec: DomainSpec) -> ValidationReport:
    rep = validate_spec(spec)
    rep.raise_for_failures()
    return rep


# ---------------------------------------------------------------------------
# orbits and localization


@dataclass(frozen=True)
class Orbit:
    index: int
    corners: tuple[int, ...]

    def points(self, spec: DomainSpec) -> np.ndarray:
        return spec.corners[list(self.corners)]


def compute_orbits(spec: DomainSpec) -> list[Orbit]:
    """Partition the corners into classes connected by the maps (in either direction)."""
    parent = list(range(len(spec.corners)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m in spec.maps:
        k = spec._corner_at(m(spec.corners[m.corner]))
        if k >= 0:
            ra, rb = find(m.corner), find(k)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for c in range(len(spec.corners)):
        groups.setdefault(find(c), []).append(c)
    ordered = sorted(groups.values(), key=min)
    return [Orbit(nu, tuple(g)) for nu, g in enumerate(ordered)]


@dataclass(frozen=True)
class PencilTerm:
    k: int
    weight: float
    rotation: float
    ratio: float


@dataclass(frozen=True)
class PencilSystem:
    """Localized model problem of one orbit.

    ``terms[(j, sigma)]`` lists the nonlocal terms on the side of corner j at
    local angle (-1)**sigma * omega_j.
    """

    half_openings: tuple[float, ...]
    terms: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.half_openings)

    def side_terms(self, j: int, sigma: int) -> tuple[PencilTerm, ...]:
        return tuple(self.terms.get((j, sigma), ()))

    def side_total(self, j: int, sigma: int) -> float:
        return sum(t.weight for t in self.side_terms(j, sigma))

    @property
    def all_zero(self) -> bool:
        return all(t.weight == 0 for ts in self.terms.values() for t in ts)

    def check(self) -> "PencilSystem":
        for j, w in enumerate(self.half_openings):
            if not (0.0 < w < math.pi):
                raise DegenerateCorner(f"half-opening {w} of corner {j} not in (0, pi)")
        for (j, sigma), ts in self.terms.items():
            a = (-1) ** sigma * self.half_openings[j]
            for t in ts:
                if t.weight < 0:
                    raise WeightViolation(f"negative weight on side ({j}, {sigma})")
                if t.ratio <= 0:
                    raise WeightViolation(f"nonpositive homothety ratio on side ({j}, {sigma})")
                if not abs(a + t.rotation) < self.half_openings[t.k]:
                    raise AngleRangeViolation(
                        f"side ({j}, {sigma}): |{a:.6g} + {t.rotation:.6g}| >= omega_{t.k} = {self.half_openings[t.k]:.6g}")
            if self.side_total(j, sigma) > 1.0 + 1e-12:
                raise WeightViolation(f"side ({j}, {sigma}) weight total exceeds 1")
        for j in range(self.size):
            if self.side_total(j, 1) + self.side_total(j, 2) >= 2.0:
                raise WeightViolation(f"two-side total at corner {j} is not < 2")
        return self

    def to_json(self) -> dict:
        return {
            "half_openings": list(self.half_openings),
            "terms": [
                {"j": j, "sigma": s, "k": t.k, "weight": t.weight, "rotation": t.rotation, "ratio": t.ratio}
                for (j, s), ts in sorted(self.terms.items()) for t in ts
            ],
        }

    @classmethod
    def from_terms(cls, half_openings: Iterable[float], items: Iterable[tuple]) -> "PencilSystem":
        """Build from tuples (j, sigma, k, weight, rotation, ratio)."""
        terms: dict = {}
        for j, s, k, b, th, chi in items:
            terms.setdefault((j, s), []).append(PencilTerm(k, float(b), float(th), float(chi)))
        return cls(tuple(float(w) for w in half_openings), {key: tuple(v) for key, v in terms.items()})


def localize(spec: DomainSpec, orbit: Orbit) -> PencilSystem:
    """Corner-localized pencil data for one orbit."""
    pos = {c: j for j, c in enumerate(orbit.corners)}
    infos = [spec.corner_info[c] for c in orbit.corners]
    items = []
    for j, info in enumerate(infos):
        g = np.asarray(info.point)[None]
        for sigma, arc in ((1, info.out_arc), (2, info.in_arc)):
            a = (-1) ** sigma * info.half_opening
            for m in spec.maps_on_arc(arc):
                if m.corner != info.index:
                    continue
                c, resid, k = _fit_corner_map(spec, m)
                if k < 0 or resid > CONFORMAL_RTOL:
                    raise NonConformalCornerMap(f"map on arc {m.arc} is not a rotation-homothety at its corner")
                theta = wrap_angle(a + cmath.phase(c)) - a
                items.append((j, sigma, pos[k], float(spec.map_weight(m, g)[0]), theta, abs(c)))
    return PencilSystem.from_terms([i.half_opening for i in infos], items).check()
