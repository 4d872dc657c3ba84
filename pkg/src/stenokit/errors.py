"""Exception types shared across the toolkit."""

from __future__ import annotations


class StenokitError(Exception):
    """Base class for all toolkit errors."""


class InputError(StenokitError):
    """Raised for bad user input; the CLI maps these to exit code 2."""


class ShapeMismatch(InputError, ValueError):
    pass


class InvalidRoi(InputError, ValueError):
    pass


class EmptyBatch(InputError, ValueError):
    pass


class SizeMismatch(InputError, ValueError):
    pass


class MissingMask(InputError, ValueError):
    pass


class ParseError(InputError):
    """Malformed input file. ``context`` names the line/field that failed."""

    def __init__(self, message: str, context: str | None = None):
        self.context = context
        super().__init__(f"{message} ({context})" if context else message)


class ValidationError(InputError):
    """Well-formed input that violates one or more invariants.

    All violations are collected in ``errors`` before raising.
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        head = f"{len(self.errors)} validation error(s)"
        super().__init__(head + ":\n  " + "\n  ".join(self.errors))


class DegeneratePolygon(UserWarning):
    """Emitted when a polygon with collinear vertices is rasterized."""
