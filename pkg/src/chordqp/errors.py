"""Exception hierarchy shared by all modules."""


class ChordQPError(Exception):
    """Base class for solver errors."""


class InvalidProblem(ChordQPError, ValueError):
    """Problem data violates the model's invariants."""


class IndexOutOfRange(InvalidProblem):
    pass


class DimensionMismatch(InvalidProblem):
    pass


class NotPerfectElimination(ChordQPError):
    pass


class DisconnectedCliqueGraph(ChordQPError):
    pass


class DisconnectedGroup(ChordQPError):
    pass


class UnassignableTerm(ChordQPError):
    pass


class InvalidTree(ChordQPError):
    """A clique tree fails one of its structural invariants."""


class NumericalBreakdown(ChordQPError):
    """Base for failures of the numerical kernels."""

    def __init__(self, message: str, clique: int | None = None):
        super().__init__(message if clique is None else f"clique {clique}: {message}")
        self.clique = clique


class SingularKKT(NumericalBreakdown):
    pass


class InconsistentConstraints(NumericalBreakdown):
    pass


class SeparatorMismatch(NumericalBreakdown):
    pass


class SingularG(NumericalBreakdown):
    pass


class InvalidSplit(InvalidProblem):
    pass


class InconsistentSharing(InvalidProblem):
    pass


class DisconnectedCoupling(InvalidProblem):
    pass
