"""Elliptic problems with nonlocal boundary conditions near corner points.

Corner operator pencils and eigenvalue-free strips, positive barriers, a monotone
finite-difference resolvent, discrete Feller-semigroup checks and a Feynman-Kac
Monte Carlo cross-check.
"""

__version__ = "0.1.0"

from .errors import NonlocalFellerError, SpecError  # noqa: E402
from .geometry import DomainSpec, PencilSystem, compute_orbits, localize, validate_spec  # noqa: E402
from .library import builtin  # noqa: E402

__all__ = [
    "DomainSpec",
    "NonlocalFellerError",
    "PencilSystem",
    "SpecError",
    "__version__",
    "builtin",
    "compute_orbits",
    "localize",
    "validate_spec",
]
