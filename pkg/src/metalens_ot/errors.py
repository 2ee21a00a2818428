"""Exception hierarchy shared by every module."""


class MetalensError(Exception):
    """Base class for all package errors."""


# geometry
class AllZeroDensity(MetalensError):
    pass


class NegativeDensity(MetalensError):
    pass


class InvalidSource(MetalensError):
    pass


class NoIntersection(MetalensError):
    pass


class MultipleIntersections(MetalensError):
    pass


# cost
class SingularUpdate(MetalensError):
    pass


class SingularA(MetalensError):
    pass


# transport
class SizeExceeded(MetalensError):
    pass


class NotConverged(MetalensError):
    def __init__(self, max_iter: int, marginal_error: float):
        super().__init__(
            f"Sinkhorn did not converge in {max_iter} iterations "
            f"(marginal error {marginal_error:.3e})"
        )
        self.max_iter = max_iter
        self.marginal_error = marginal_error


class DiffuseRow(MetalensError):
    pass


# phase
class NonInjectiveTargetSampling(MetalensError):
    pass


class SolverDiverged(MetalensError):
    pass


# optics
class Evanescent(MetalensError):
    pass


class NonTangentialPhase(MetalensError):
    pass


class NoRealRoot(MetalensError):
    pass


class MissedSurface(MetalensError):
    pass


class ExcessiveLoss(MetalensError):
    pass


class GridMismatch(MetalensError):
    pass


# conditions
class InvalidAlpha(MetalensError):
    pass


class InvalidAlphas(MetalensError):
    pass


# cli
class ConfigError(MetalensError):
    pass
