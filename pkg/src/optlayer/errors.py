"""Exception hierarchy shared across optlayer modules."""


class OptLayerError(Exception):
    """Base class for all optlayer errors."""


# -- problem validation ------------------------------------------------------

class ValidationError(OptLayerError, ValueError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFiniteData(ValidationError):
    pass


class NotPsd(ValidationError):
    pass


class RankDeficientEquality(ValidationError):
    pass


# -- differentiation ---------------------------------------------------------

class NoFactorCache(OptLayerError):
    """Raised when a backward pass is requested for a solution without a KKT factor."""


class SolveFailedAtPerturbation(OptLayerError):
    pass


# -- argmin reference formulas ----------------------------------------------

class ArgminError(OptLayerError, ValueError):
    pass


class SingularHessian(ArgminError):
    pass


class SingularReducedHessian(ArgminError):
    pass


class SingularMatrix(ArgminError):
    pass


class NotAtMinimizer(ArgminError):
    pass


class NullspaceMismatch(ArgminError):
    pass


class RankDeficient(ArgminError):
    pass


class BoundaryPoint(ArgminError):
    pass


class EvaluationFailure(ArgminError):
    pass


# -- cone programs -----------------------------------------------------------

class ConeError(OptLayerError, ValueError):
    pass


class ComplementarityViolation(ConeError):
    pass


class DegenerateProjection(ConeError):
    pass


class LsqrNoConvergence(ConeError):
    pass


# -- expressions and canonicalization ---------------------------------------

class ExprError(OptLayerError, ValueError):
    pass


class ShapeError(ExprError):
    pass


class UnknownCurvature(ExprError):
    def __init__(self, message, path=()):
        super().__init__(message)
        self.path = tuple(path)


class UnsupportedAtom(ExprError):
    pass


class NotVerified(ExprError):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class MissingParameterValue(ExprError):
    pass


# -- modeling language -------------------------------------------------------

class DslError(OptLayerError, ValueError):
    """Error in problem source text, tagged with a 1-based line and column."""

    def __init__(self, message, line=0, col=0):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


class LexError(DslError):
    pass


class ParseError(DslError):
    pass


class UndeclaredIdentifier(ParseError):
    pass


class ArityError(ParseError):
    pass


# -- layers ------------------------------------------------------------------

class LayerSolveError(OptLayerError):
    """A QP layer's forward solve did not reach optimality."""

    def __init__(self, message, layer_index=None, status=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.status = status


class TapeConsumed(OptLayerError):
    """A tape was replayed backward more than once."""
