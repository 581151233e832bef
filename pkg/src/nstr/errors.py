"""Exception hierarchy shared by all nstr modules."""


class NstrError(Exception):
    """Base class for every error raised by the package."""


class NotConverged(NstrError):
    def __init__(self, what: str, max_iter: int, residual: float | None = None):
        self.what = what
        self.max_iter = max_iter
        self.residual = residual
        msg = f"{what} did not converge within {max_iter} iterations"
        if residual is not None:
            msg += f" (residual {residual:.3e})"
        super().__init__(msg)


class DegenerateDenominator(NstrError):
    """Predicted model decrease is not positive although the step is nonzero."""


class CauchyDecreaseViolation(NstrError):
    """A subproblem solver returned a step that misses its Cauchy-decrease bound."""


class BiactiveSetTooLarge(NstrError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(
            f"possibly biactive set has {size} indices, powerset enumeration is capped at {cap}"
        )


class OracleFailure(NstrError):
    """A brute-force test oracle found no admissible candidate."""


class PreconditionViolated(NstrError):
    """Input parameters violate a stated precondition; the message names it."""
