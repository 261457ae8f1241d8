"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class NonlocalFellerError(Exception):
    """Base class for every error raised by this package."""


class SpecError(NonlocalFellerError, ValueError):
    """The domain specification is malformed or violates an admissibility condition."""

    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class StructureError(SpecError):
    """Arcs do not close up, corners do not sit on arc junctions, or orientation is wrong."""


class EllipticityViolation(SpecError):
    pass


class SignViolation(SpecError):
    pass


class WeightViolation(SpecError):
    pass


class MapRangeViolation(SpecError):
    pass


class NonConformalCornerMap(SpecError):
    pass


class NeighborhoodViolation(SpecError):
    """The radii eps < eps1 do not give disjoint plane-angle neighbourhoods."""


class DegenerateCorner(SpecError):
    """Corner opening outside (0, 2*pi) or exactly pi."""


class AngleRangeViolation(SpecError):
    pass


class NonIsotropicCorner(SpecError):
    """Principal part at a corner is not a multiple of the Laplacian."""


# pencil
class PencilError(NonlocalFellerError):
    pass


class BoundaryZero(PencilError):
    pass


class NonConvergedSubdivision(PencilError):
    pass


class WindowTooSmall(PencilError):
    pass


class Lemma1Violation(PencilError):
    """A pencil eigenvalue was found on (or numerically at) the real axis."""


class DegenerateRectangle(PencilError, ValueError):
    pass


# barrier
class BarrierError(NonlocalFellerError):
    pass


class SingularAtZero(BarrierError):
    pass


class PositivityFailure(BarrierError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class NonpositiveInfimum(BarrierError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


# fdsolver
class SolverError(NonlocalFellerError):
    pass


class StepTooCoarse(SolverError, ValueError):
    pass


class MapImageTooShallow(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class IterationDivergence(SolverError):
    pass


class InsufficientRadii(SolverError, ValueError):
    pass


SolverFailure = SolverError


# semigroup
class SemigroupError(NonlocalFellerError):
    pass


class ContractionViolation(SemigroupError):
    pass


class PositivityViolation(SemigroupError):
    pass


# montecarlo
class StepRejection(NonlocalFellerError):
    pass


class UsageError(NonlocalFellerError):
    pass
