"""Exception types raised by the toolkit.

Each one subclasses a built-in so callers that only care about the broad
category (``ValueError``, ``RuntimeError``...) keep working; the CLI maps
the specific types to exit codes.
"""
from __future__ import annotations

from typing import Any, Dict, Optional


class ShapeError(ValueError):
    """Operands with inconsistent shapes."""


class PartitionError(ValueError):
    """A spatial partition plan cannot be built for the requested grid."""

    def __init__(self, message: str, axis: Optional[str] = None) -> None:
        super().__init__(message)
        self.axis = axis

    def __reduce__(self):
        return (type(self), (self.args[0], self.axis))


class ConfigError(ValueError):
    """Invalid experiment configuration."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message

    def __reduce__(self):
        return (type(self), (self.field, self.message))

    def details(self) -> Dict[str, Any]:
        return {"field": self.field}


class InvariantViolation(RuntimeError):
    """A distributed result disagrees with its single-core oracle."""

    def __init__(self, message: str, max_deviation: float, location: Any = None) -> None:
        super().__init__(f"{message} (max deviation {max_deviation!r} at {location})")
        self.message = message
        self.max_deviation = max_deviation
        self.location = location

    def __reduce__(self):
        return (type(self), (self.message, self.max_deviation, self.location))

    def details(self) -> Dict[str, Any]:
        return {"max_deviation": self.max_deviation, "location": str(self.location)}


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss

    def __reduce__(self):
        return (type(self), (self.step, self.loss))

    def details(self) -> Dict[str, Any]:
        return {"step": self.step}


class NonFiniteError(FloatingPointError):
    """Optimizer inputs contain NaN or infinity."""
