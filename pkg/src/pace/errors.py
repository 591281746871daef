"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PaceError(Exception):
    pass


class ValidationError(PaceError):
    pass


class CycleDetected(ValidationError):
    pass


class BadLabel(ValidationError):
    pass


class DuplicateEdge(ValidationError):
    pass


class SelfLoop(ValidationError):
    pass


class ParseError(PaceError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TooManyNodes(PaceError):
    pass


class NotATree(PaceError):
    pass


class BadDepths(PaceError):
    pass


class ShapeMismatch(PaceError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class NonFinite(PaceError):
    pass


class AllMaskedRow(PaceError):
    pass


class DoubleBackward(PaceError):
    pass


class NoUniqueSink(PaceError):
    pass


class DegenerateTargets(PaceError):
    pass


class GenerationFailed(PaceError):
    pass
