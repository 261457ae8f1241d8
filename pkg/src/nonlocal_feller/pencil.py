"""Characteristic determinant of the corner pencil and its zeros.

Each corner contributes phi_j(w) = A_j cosh(lam w) + B_j sinh(lam w)/lam.  The
basis is entire in lam, so the determinant is entire and the argument principle
applies on any rectangle.  Rows are ordered per corner as (side +omega_j,
side -omega_j), i.e. sigma = 2 then sigma = 1; for zero weights this gives
det = prod_j(-sinh(2 lam omega_j)/lam).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundaryZero,
    DegenerateRectangle,
    Lemma1Violation,
    NonConvergedSubdivision,
    WindowTooSmall,
)
from .geometry import PencilSystem, PencilTerm

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 20.0
MAX_PHASE_STEP = math.pi / 4
BOUNDARY_ZERO_DIST = 1e-9  # Newton distance |f/f'| (relative to max(1, |z|)) that counts as a zero on the contour
BASIS_SWITCH = 0.5
CLUSTER_SIZE = 1e-3  # unsplittable rectangles below this diameter are reported as one multiple zero


def cosh_basis(lam, w):
    return np.cosh(np.asarray(lam, dtype=complex) * w)


def sinhc_basis(lam, w):
    """sinh(lam w) / lam, continued to lam = 0 by w."""
    lam = np.asarray(lam, dtype=complex)
    z = lam * w
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, lam)
    series = w * (1.0 + z * z / 6.0 + z**4 / 120.0)
    return np.where(small, series, np.sinh(z) / safe)


class _Compiled:
    """Flat description of the matrix entries for batched evaluation."""

    def __init__(self, sys: PencilSystem):
        self.n = sys.size
        rows, cols, ang = [], [], []
        for j, w in enumerate(sys.half_openings):
            for r, a in ((2 * j, w), (2 * j + 1, -w)):
                rows.append(r)
                cols.append(j)
                ang.append(a)
        self.diag = (np.array(rows), np.array(cols), np.array(ang))
        trows, tk, tang, tb, tlog = [], [], [], [], []
        for (j, sigma), ts in sys.terms.items():
            row = 2 * j if sigma == 2 else 2 * j + 1
            a = (-1) ** sigma * sys.half_openings[j]
            for t in ts:
                trows.append(row)
                tk.append(t.k)
                tang.append(a + t.rotation)
                tb.append(t.weight)
                tlog.append(math.log(t.ratio))
        self.terms = (np.array(trows, dtype=int), np.array(tk, dtype=int), np.array(tang),
                      np.array(tb), np.array(tlog))

    def matrix(self, lam) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lam, dtype=complex))
        m = np.zeros((lam.size, 2 * self.n, 2 * self.n), dtype=complex)
        rows, cols, ang = self.diag
        for r, c, a in zip(rows, cols, ang):
            m[:, r, 2 * c] += cosh_basis(lam, a)
            m[:, r, 2 * c + 1] += sinhc_basis(lam, a)
        for r, k, a, b, lg in zip(*self.terms):
            fac = b * np.exp(1j * lam * lg)
            m[:, r, 2 * k] -= fac * cosh_basis(lam, a)
            m[:, r, 2 * k + 1] -= fac * sinhc_basis(lam, a)
        return m

    def exp_matrix(self, lam) -> np.ndarray:
        """Same rows in the basis (e^{lam w}, e^{-lam w}) per corner: M T, det T_j = -2 lam."""
        lam = np.atleast_1d(np.asarray(lam, dtype=complex))
        m = np.zeros((lam.size, 2 * self.n, 2 * self.n), dtype=complex)
        rows, cols, ang = self.diag
        for r, c, a in zip(rows, cols, ang):
            m[:, r, 2 * c] += np.exp(lam * a)
            m[:, r, 2 * c + 1] += np.exp(-lam * a)
        for r, k, a, b, lg in zip(*self.terms):
            fac = b * np.exp(1j * lam * lg)
            m[:, r, 2 * k] -= fac * np.exp(lam * a)
            m[:, r, 2 * k + 1] -= fac * np.exp(-lam * a)
        return m

    def det(self, lam) -> np.ndarray:
        return np.linalg.det(self.matrix(lam))

    def scaled_det(self, lam) -> np.ndarray:
        """Determinant up to a positive factor (same phase, O(1) size).

        Away from lam = 0 the exponential basis is used: cosh/sinh columns become
        nearly parallel for large |lam| and an LU of them loses all digits.
        """
        lam = np.atleast_1d(np.asarray(lam, dtype=complex))
        far = np.abs(lam) > BASIS_SWITCH
        m = np.where(far[:, None, None], self.exp_matrix(lam), self.matrix(lam))
        for axis in (2, 1):
            scale = np.max(np.abs(m), axis=axis, keepdims=True)
            m = m / np.where(scale > 0, scale, 1.0)
        d = np.linalg.det(m)
        phase = np.exp(-1j * self.n * np.angle(np.where(far, -lam, 1.0)))
        return d * phase

_CACHE: dict[int, tuple[PencilSystem, _Compiled]] = {}


def _compiled(sys: PencilSystem) -> _Compiled:
    hit = _CACHE.get(id(sys))
    if hit is not None and hit[0] is sys:
        return hit[1]
    comp = _Compiled(sys)
    if len(_CACHE) > 256:
        _CACHE.clear()
    _CACHE[id(sys)] = (sys, comp)
    return comp


def characteristic_matrix(sys: PencilSystem, lam):
    """Matrix of the boundary rows in the basis (A_1, B_1, ..., A_N, B_N).

    Scalar ``lam`` gives a (2N, 2N) array; an array of shape (n,) gives (n, 2N, 2N).
    """
    m = _compiled(sys).matrix(lam)
    return m[0] if np.ndim(lam) == 0 else m


def characteristic_det(sys: PencilSystem, lam):
    d = _compiled(sys).det(lam)
    return complex(d[0]) if np.ndim(lam) == 0 else d


def scaled_det(sys: PencilSystem, lam):
    d = _compiled(sys).scaled_det(lam)
    return complex(d[0]) if np.ndim(lam) == 0 else d


# ---------------------------------------------------------------------------
# argument principle


@dataclass(frozen=True)
class Rect:
    re_min: float
    re_max: float
    im_min: float
    im_max: float

    def __post_init__(self):
        if not (self.re_max > self.re_min and self.im_max > self.im_min):
            raise DegenerateRectangle(f"rectangle {self} has zero or negative area")

    @property
    def width(self) -> float:
        return self.re_max - self.re_min

    @property
    def height(self) -> float:
        return self.im_max - self.im_min

    @property
    def diameter(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> complex:
        return complex(0.5 * (self.re_min + self.re_max), 0.5 * (self.im_min + self.im_max))

    def contains(self, z: complex, slack: float = 0.0) -> bool:
        return (self.re_min - slack <= z.real <= self.re_max + slack
                and self.im_min - slack <= z.imag <= self.im_max + slack)

    def corners(self) -> list[complex]:
        return [complex(self.re_min, self.im_min), complex(self.re_max, self.im_min),
                complex(self.re_max, self.im_max), complex(self.re_min, self.im_max)]

    def grown(self, d: float) -> "Rect":
        return Rect(self.re_min - d, self.re_max + d, self.im_min - d, self.im_max + d)

    def to_json(self) -> list[float]:
        return [self.re_min, self.re_max, self.im_min, self.im_max]


@dataclass
class ContourCount:
    count: int
    rect: Rect
    total_phase: float
    min_modulus: float
    n_evals: int
    moment: complex  # sum of the enclosed zeros (with multiplicity), from the contour integral
    perturbed: bool = False


def _contour_points(rect: Rect, spacing: float) -> np.ndarray:
    c = rect.corners() + [rect.corners()[0]]
    pts = []
    for a, b in zip(c[:-1], c[1:]):
        n = max(8, int(math.ceil(abs(b - a) / spacing)))
        pts.append(a + (b - a) * np.arange(n) / n)
    pts.append(np.array([c[0]]))
    return np.concatenate(pts)


def _zero_distance(comp: _Compiled, z: np.ndarray, f: np.ndarray, k: int = 8) -> tuple[float, complex]:
    """Smallest relative Newton distance |f/f'| over the ``k`` deepest local minima of |f| on the contour.

    The scaled determinant can decay exponentially along the contour, so a small modulus
    alone does not mean a zero is near.
    """
    a = np.abs(f)
    inner = np.flatnonzero((a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:])) + 1
    cand = np.concatenate([inner, [0, len(a) - 1]])
    cand = cand[np.argsort(a[cand])[:k]]
    zc = z[cand]
    eta = 1e-6 * np.maximum(1.0, np.abs(zc))
    fp = comp.scaled_det(np.concatenate([zc + eta, zc - eta]))
    deriv = np.abs(fp[: len(zc)] - fp[len(zc):]) / (2 * eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(deriv > 0, a[cand] / deriv, np.where(a[cand] > 0, np.inf, 0.0))
    dist = dist / np.maximum(1.0, np.abs(zc))
    i = int(np.argmin(dist))
    return float(dist[i]), complex(zc[i])


def _track(comp: _Compiled, rect: Rect, max_passes: int = 60) -> ContourCount:
    spacing = min(0.1, 0.125 * min(rect.width, rect.height))
    z = _contour_points(rect, spacing)
    f = comp.scaled_det(z)
    n_evals = len(z)
    min_len = 1e-13 * max(1.0, rect.diameter)
    verified = False
    for _ in range(max_passes):
        if _zero_distance(comp, z, f, k=1)[0] < BOUNDARY_ZERO_DIST:
            break
        # refine where the log-step (modulus and phase) is large
        step = np.log(f[1:] / f[:-1])
        far = np.abs(z) > BASIS_SWITCH
        # the positive normalisation jumps where the basis switches; use the phase alone there
        step = np.where(far[1:] == far[:-1], np.abs(step), np.abs(step.imag))
        bad = np.flatnonzero(step >= MAX_PHASE_STEP)
        if bad.size == 0:
            if verified:
                break
            # one confirmation pass on all midpoints guards against aliasing past a near-boundary zero
            bad = np.arange(len(z) - 1)
            verified = True
        else:
            verified = False
        if np.min(np.abs(z[bad + 1] - z[bad])) < min_len:
            raise NonConvergedSubdivision("phase tracking could not resolve the contour")
        zm = 0.5 * (z[bad] + z[bad + 1])
        fm = comp.scaled_det(zm)
        n_evals += len(zm)
        z = np.insert(z, bad + 1, zm)
        f = np.insert(f, bad + 1, fm)
    else:
        raise NonConvergedSubdivision("phase tracking did not converge")
    fmin = float(np.min(np.abs(f)))
    dist, where = _zero_distance(comp, z, f)
    if dist < BOUNDARY_ZERO_DIST:
        raise BoundaryZero(f"det vanishes near {where:.6g} on the boundary of {rect}")
    dlog = np.log(f[1:] / f[:-1])
    total = float(np.sum(dlog.imag))
    wind = total / (2.0 * math.pi)
    count = int(round(wind))
    if abs(wind - count) > 1e-2:
        raise NonConvergedSubdivision(f"non-integer winding {wind:.4f}")
    zmid = 0.5 * (z[1:] + z[:-1])
    moment = complex(np.sum(zmid * dlog) / (2j * math.pi))
    return ContourCount(count, rect, total, fmin, n_evals, moment)


def contour_count(sys: PencilSystem, rect: Rect, perturb: bool = True, max_attempts: int = 6) -> ContourCount:
    """Winding count of det around ``rect``; on a boundary zero, grow the rectangle slightly."""
    comp = _compiled(sys)
    attempts = max_attempts if perturb else 1
    cur = rect
    for attempt in range(attempts):
        try:
            res = _track(comp, cur)
            res.perturbed = attempt > 0
            return res
        except BoundaryZero:
            if attempt == attempts - 1:
                raise
            d = 1e-3 * min(rect.width, rect.height) * (1.618 ** attempt) * (1 + 0.137 * attempt)
            cur = rect.grown(d)
            log.info("boundary zero on %s, retrying on %s", rect, cur)
    raise AssertionError("unreachable")


def count_zeros(sys: PencilSystem, rect) -> int:
    """Number of zeros of the characteristic determinant inside ``rect`` (with multiplicity)."""
    if not isinstance(rect, Rect):
        rect = Rect(*rect)
    return contour_count(sys, rect).count


# ---------------------------------------------------------------------------
# eigenvalues


@dataclass
class Eigenvalue:
    value: complex
    count: int
    residual: float

    def to_json(self) -> dict:
        return {"re": self.value.real, "im": self.value.imag, "count": self.count, "residual": self.residual}


@dataclass
class Spectrum:
    strip: tuple[float, float]
    window: float
    eigenvalues: list[Eigenvalue]
    total_count: int
    certificate: dict = field(default_factory=dict)
    window_warning: bool = False

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.eigenvalues], dtype=complex)

    def to_json(self) -> dict:
        return {
            "strip": list(self.strip),
            "re_window": self.window,
            "eigenvalues": [e.to_json() for e in self.eigenvalues],
            "total_count": self.total_count,
            "window_warning": self.window_warning,
            "note": "eigenvalue search restricted to |Re lambda| <= re_window",
            "certificate": self.certificate,
        }


def _secant(comp: _Compiled, z0: complex, step: float, maxit: int = 80) -> complex:
    f = lambda z: complex(comp.det(np.array([z]))[0])
    a, b = z0, z0 + step
    fa, fb = f(a), f(b)
    for _ in range(maxit):
        if fb == 0 or fb == fa:
            break
        c = b - fb * (b - a) / (fb - fa)
        if not np.isfinite(c):
            break
        a, fa = b, fb
        b, fb = c, f(c)
        if abs(b - a) <= 1e-15 * max(1.0, abs(b)):
            break
    return b


def _refine_multiple(comp: _Compiled, z: complex, m: int, scale: float, maxit: int = 30) -> complex:
    """Modified Newton z -= m f / f' for a zero of multiplicity m (central-difference derivative)."""
    f = lambda w: complex(comp.det(np.array([w]))[0])
    fz = f(z)
    for _ in range(maxit):
        eta = max(1e-6 * scale, 1e-9)
        d = (f(z + eta) - f(z - eta)) / (2 * eta)
        if d == 0 or not np.isfinite(d):
            break
        w = z - m * fz / d
        fw = f(w)
        if not abs(fw) < abs(fz):
            break
        z, fz = w, fw
    return z


def _split(comp, sys, rect: Rect, count: int):
    horizontal = rect.width >= rect.height
    for frac in (0.5 + 0.0137, 0.5 - 0.0291, 0.4619, 0.5417, 0.3821, 0.6179):
        if horizontal:
            x = rect.re_min + frac * rect.width
            kids = (Rect(rect.re_min, x, rect.im_min, rect.im_max), Rect(x, rect.re_max, rect.im_min, rect.im_max))
        else:
            y = rect.im_min + frac * rect.height
            kids = (Rect(rect.re_min, rect.re_max, rect.im_min, y), Rect(rect.re_min, rect.re_max, y, rect.im_max))
        try:
            counts = [_track(comp, k) for k in kids]
        except BoundaryZero:
            continue
        if sum(c.count for c in counts) != count:
            log.info("child counts %s do not add up to %d, trying another split", [c.count for c in counts], count)
            continue
        return counts
    raise NonConvergedSubdivision(f"could not split {rect} consistently ({count} zeros)")


def _locate(sys: PencilSystem, root: ContourCount, tol: float, min_cell: float) -> list[Eigenvalue]:
    comp = _compiled(sys)
    out: list[Eigenvalue] = []
    stack = [root]
    while stack:
        cc = stack.pop()
        if cc.count == 0:
            continue
        if cc.count == 1 or cc.rect.diameter < min_cell:
            guess = cc.moment / cc.count
            if not cc.rect.contains(guess):
                guess = cc.rect.center
            z = _secant(comp, guess, 1e-6 * cc.rect.diameter)
            if not (np.isfinite(z) and cc.rect.contains(z, slack=1e-9 * max(1.0, cc.rect.diameter))):
                if cc.rect.diameter >= min_cell:
                    stack.extend(_split(comp, sys, cc.rect, cc.count))
                    continue
                z = guess
            res = float(abs(comp.scaled_det(np.array([z]))[0]))
            if res > tol and cc.rect.diameter >= min_cell and cc.count == 1:
                log.debug("secant residual %.3g above tolerance at %s", res, z)
            out.append(Eigenvalue(complex(z), cc.count, res))
            continue
        try:
            stack.extend(_split(comp, sys, cc.rect, cc.count))
        except NonConvergedSubdivision:
            # a multiple zero (or a cluster below the boundary-zero resolution) cannot be split
            if cc.rect.diameter > CLUSTER_SIZE:
                raise
            z = _refine_multiple(comp, cc.moment / cc.count, cc.count, cc.rect.diameter)
            if not cc.rect.contains(z, slack=cc.rect.diameter):
                z = cc.moment / cc.count
            out.append(Eigenvalue(complex(z), cc.count, float(abs(comp.scaled_det(np.array([z]))[0]))))
    out.sort(key=lambda e: (-e.value.imag, e.value.real))
    return out


def find_eigenvalues(sys: PencilSystem, strip, tol: float = 1e-10, window: float = DEFAULT_WINDOW,
                     strict: bool = False) -> Spectrum:
    """All zeros with im_min < Im lam < im_max and |Re lam| <= window."""
    im_min, im_max = strip
    root = contour_count(sys, Rect(-window, window, im_min, im_max))
    eigs = _locate(sys, root, tol, min_cell=1e-7)
    if sum(e.count for e in eigs) != root.count:
        raise NonConvergedSubdivision("located zeros do not match the winding count of the window")
    edge = 0.05 * window
    warn = any(abs(e.value.real) > window - edge for e in eigs)
    if warn:
        msg = f"zeros found within {edge:g} of the Re-window edge {window:g}; zeros may lie beyond it"
        if strict:
            raise WindowTooSmall(msg)
        log.warning(msg)
    cert = {"rect": root.rect.to_json(), "perturbed": root.perturbed, "total_phase": root.total_phase,
            "min_modulus": root.min_modulus, "n_evals": root.n_evals}
    return Spectrum((im_min, im_max), window, eigs, root.count, cert, warn)


@dataclass
class StripReport:
    delta1: float
    delta: float
    leading_decay: float | None
    eigenvalues: list[Eigenvalue]
    window: float
    resolution: float
    capped: bool

    def to_json(self) -> dict:
        return {
            "delta1": self.delta1,
            "delta": self.delta,
            "leading_decay": self.leading_decay,
            "eigenvalues": [e.to_json() for e in self.eigenvalues],
            "re_window": self.window,
            "resolution": self.resolution,
            "delta1_capped": self.capped,
            "note": "eigenvalue-free strip certified only for |Re lambda| <= re_window",
        }


def certify_strips(sys: PencilSystem, window: float = DEFAULT_WINDOW, resolution: float = 1e-3,
                   delta_max: float = 2.0) -> StripReport:
    """Eigenvalue-free strip below the real axis and the leading corner decay exponent."""
    near = contour_count(sys, Rect(-window, window, -resolution, resolution))
    if near.count:
        spec = find_eigenvalues(sys, (-resolution, resolution), window=window)
        bad = spec.eigenvalues[0].value if spec.eigenvalues else None
        raise Lemma1Violation(f"{near.count} zero(s) with |Im lambda| <= {resolution}: {bad}")

    def free(d: float) -> bool:
        return count_zeros(sys, Rect(-window, window, -d, 0.0)) == 0

    lo, hi = resolution, delta_max
    capped = free(hi)
    if capped:
        lo = hi
    else:
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if free(mid):
                lo = mid
            else:
                hi = mid
    delta1 = lo

    top = min(delta1, 1.0)
    spec = find_eigenvalues(sys, (-(1.0 + top) - 0.25, -0.2 * delta1), window=window)
    ims = spec.values.imag
    delta = None
    for f in (0.5, 0.45, 0.55, 0.4, 0.6, 0.35, 0.3, 0.25):
        d = min(f * delta1, 1.0)
        if ims.size == 0 or min(np.min(np.abs(ims + 1.0 + d)), np.min(np.abs(ims + d))) > 0.02:
            delta = d
            break
    if delta is None:
        delta = min(0.5 * delta1, 1.0)
    inside = [e for e in spec.eigenvalues if -1.0 - delta < e.value.imag < -delta]
    lead = min((abs(e.value.imag) for e in inside), default=None)
    return StripReport(delta1, delta, lead, inside, window, resolution, capped)


# ---------------------------------------------------------------------------
# random admissible systems (property tests, CLI demos)


def random_system(rng: np.random.Generator, max_corners: int = 3, max_terms: int = 2,
                  allow_unit_side: bool = True) -> PencilSystem:
    """Random system satisfying the weight and angle conditions, strict two-side total."""
    n = int(rng.integers(1, max_corners + 1))
    omegas = rng.uniform(0.15, math.pi - 0.15, size=n)
    items = []
    for j in range(n):
        totals = rng.uniform(0.0, 1.0, size=2)
        if allow_unit_side and rng.random() < 0.3:
            totals[int(rng.integers(2))] = 1.0
        if totals.sum() >= 2.0:
            totals[1] = 0.9
        for sigma in (1, 2):
            nt = int(rng.integers(0, max_terms + 1))
            if nt == 0:
                continue
            parts = rng.dirichlet(np.ones(nt)) * totals[sigma - 1]
            a = (-1) ** sigma * omegas[j]
            for b in parts:
                k = int(rng.integers(n))
                target = rng.uniform(-0.95, 0.95) * omegas[k]
                chi = float(np.exp(rng.uniform(-1.0, 1.0)))
                items.append((j, sigma, k, float(b), target - a, chi))
    return PencilSystem.from_terms(omegas, items).check()


def dirichlet_system(*half_openings: float) -> PencilSystem:
    return PencilSystem(tuple(float(w) for w in half_openings), {})


__all__ = [
    "PencilTerm", "Rect", "ContourCount", "Eigenvalue", "Spectrum", "StripReport",
    "characteristic_matrix", "characteristic_det", "scaled_det", "count_zeros", "contour_count",
    "find_eigenvalues", "certify_strips", "random_system", "dirichlet_system",
]
