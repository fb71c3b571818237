"""Exception types shared across the toolkit."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible dimensions."""


class CapabilityError(RuntimeError):
    """The request is outside the supported problem class or size."""


class NotPsdError(ValueError):
    """A matrix required to be positive semidefinite is not.

    Carries the offending smallest eigenvalue in ``min_eig``.
    """

    def __init__(self, message: str, min_eig: float):
        super().__init__(message)
        self.min_eig = float(min_eig)


class NotCompletelyPositiveError(NotPsdError):
    """A map required to be completely positive has a non-PSD Choi matrix."""


class IncompleteFactorizationError(ValueError):
    """A factorization is missing a value on a required generator."""


class ConstructionError(RuntimeError):
    """A lift or factorization construction failed a structural check."""


class PropernessWarning(UserWarning):
    """A properness precondition could not be certified; results may fail."""
