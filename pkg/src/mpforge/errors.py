"""Exception and warning types shared by every mpforge module."""

from __future__ import annotations


class MPForgeError(Exception):
    """Base class for all library errors.

    ``kind`` is a short machine-readable label used by the command line
    front end when it serializes errors to JSON.
    """

    kind = "error"

    def __init__(self, message: str, *, field: str | None = None, iteration: int | None = None):
        super().__init__(message)
        self.field = field
        self.iteration = iteration

    def to_dict(self) -> dict:
        out = {"error": self.kind, "message": str(self)}
        if self.field is not None:
            out["field"] = self.field
        if self.iteration is not None:
            out["iteration"] = self.iteration
        return out


class InvalidDimension(MPForgeError, ValueError):
    kind = "invalid-dimension"


class InvalidParameter(MPForgeError, ValueError):
    kind = "invalid-parameter"


class InvalidConfig(MPForgeError, ValueError):
    kind = "invalid-config"


class InvalidObservation(MPForgeError, ValueError):
    kind = "invalid-observation"


class UnsupportedModel(MPForgeError, ValueError):
    kind = "unsupported-model"


class NumericError(MPForgeError, ArithmeticError):
    kind = "numeric-error"


class InternalError(MPForgeError, RuntimeError):
    kind = "internal-error"


class NumericWarning(UserWarning):
    """Emitted when a quadrature rule fails its node-doubling check."""
