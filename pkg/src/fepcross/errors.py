"""Exception types shared across the package."""

from __future__ import annotations


class FepcrossError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FepcrossError):
    """Operands have incompatible shapes for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(FepcrossError):
    """An operand is outside an operation's numeric domain."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class ConfigError(FepcrossError):
    """A configuration value is invalid or inconsistent."""


class DataError(FepcrossError):
    """On-disk data is missing, malformed, or inconsistent with its metadata."""
