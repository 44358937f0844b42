"""Exception hierarchy shared by all billiards modules."""


class BilliardError(Exception):
    """Base class for every error raised by this package."""


class InvalidGeometry(BilliardError):
    """Table parameters do not produce a valid simple closed boundary."""


class OutOfRange(BilliardError):
    """Arc-length coordinate outside the component's parameter range."""


class NotIncoming(BilliardError):
    """Reflection requested for a direction not pointing into the wall."""


class NoIntersection(BilliardError):
    """Ray escaped the boundary: numerical failure or geometry bug."""


class NoConvergence(BilliardError):
    """Bracketed root-finder exhausted its iteration budget."""


class NearTangency(BilliardError):
    """Collision angle within tol_tan of grazing; orbit terminated."""


class CornerHit(BilliardError):
    """Collision within tol_corner of a component junction; orbit terminated."""


class SingularOrbit(BilliardError):
    """Excursion of the induced map entered a singularity neighborhood.

    Carries the number of full-map steps completed before termination and
    the underlying cause.
    """

    def __init__(self, message, steps_done=0, cause=None):
        super().__init__(message)
        self.steps_done = steps_done
        self.cause = cause


class NoReturnWithinCap(BilliardError):
    """First return did not occur within the iteration cap."""

    def __init__(self, message, cap=0):
        super().__init__(message)
        self.cap = cap


class AcceptanceTooLow(BilliardError):
    """Rejection sampler acceptance fell below the configured minimum."""


class InsufficientPoints(BilliardError):
    """Not enough points in a cell cloud for a diameter estimate."""


class WindowTooSmall(BilliardError):
    """Power-law fit window has too few points or spans less than required."""


class NoUsableWindow(BilliardError):
    """Correlation decay is below the noise floor at every usable lag."""


class SingularNeighborhood(BilliardError):
    """Unstable-curve growth was cut before reaching a minimal polyline."""


class DivergentProxy(BilliardError):
    """Every sample of the Z-function proxy had zero unstable radius."""


class ParseError(BilliardError):
    """Config text is malformed or contains unknown keys."""


class ValidationError(BilliardError):
    """One or more config values are out of range.

    ``problems`` is a list of (key_path, message) pairs covering every
    invalid entry, not just the first.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.problems))
