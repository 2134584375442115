"""Exception hierarchy shared across difkit."""

from __future__ import annotations


class DifkitError(Exception):
    """Base class for every error raised by difkit."""


class ValidationError(DifkitError, ValueError):
    """Input failed validation (bad file, bad config, bad scenario)."""


class MissingFile(ValidationError, FileNotFoundError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownGroupLabel(ValidationError):
    pass


class UnknownItem(ValidationError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NonBinaryResponse(ValidationError):
    def __init__(self, line: int, column: str, token: str):
        super().__init__(f"line {line}, column {column!r}: non-binary response {token!r}")
        self.line = line
        self.column = column
        self.token = token


class DegenerateItem(DifkitError):
    def __init__(self, item_id: str, message: str = "no response variance"):
        super().__init__(f"item {item_id}: {message}")
        self.item_id = item_id


class DegenerateCorrelation(DifkitError):
    pass


class NonConvergence(DifkitError):
    """EM stopped at the cycle limit. ``partial`` holds the last iterate."""

    def __init__(self, cycles: int, last_change: float, partial=None, step: str | None = None):
        label = f"{step}: " if step else ""
        super().__init__(
            f"{label}EM did not converge after {cycles} cycles (last change {last_change:.3g})"
        )
        self.cycles = cycles
        self.last_change = last_change
        self.partial = partial
        self.step = step


class SingularInformation(DifkitError):
    pass


class SingularContrastCovariance(DifkitError):
    pass


class SeparationDetected(DifkitError):
    pass


class IterationLimit(DifkitError):
    pass


class NestingViolation(DifkitError):
    pass


class PurificationNonConvergence(DifkitError):
    def __init__(self, results, trace):
        super().__init__(
            f"item purification did not converge after {len(trace.iterations)} iterations"
        )
        self.results = results
        self.trace = trace
