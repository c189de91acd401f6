"""Exception hierarchy shared by the engine and the CLI.

Every error carries a one-line ``detail`` and the process exit code the CLI
reports for it, the way an HTTP handler carries a status code.
"""

from __future__ import annotations


class RsuperError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 2

    def __init__(self, detail: str, *, exit_code: int | None = None) -> None:
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


# ---------------------------------------------------------------------------
# Input errors (exit 2)
# ---------------------------------------------------------------------------


class MalformedDocument(RsuperError):
    """A report has no non-empty section, or a cue file does not validate."""


class MalformedMeasurement(RsuperError):
    """A size phrase contains a non-positive value."""


class FormatError(RsuperError):
    """A VGR1 file is structurally invalid."""


class GridIOError(RsuperError):
    """A grid or report file cannot be read or written."""


class NonBinaryInput(RsuperError):
    """Component labelling was given values outside {0, 1}."""


class InvalidProbMaps(RsuperError):
    """Probability channels leave [0, 1] or sum above 1."""


class SpecInvalid(RsuperError):
    """A phantom spec violates its geometric invariants."""


class BothBatchesEmpty(RsuperError):
    """total_loss was given no masked and no report-supervised cases."""


# ---------------------------------------------------------------------------
# Evaluation errors
# ---------------------------------------------------------------------------


class DimsMismatch(RsuperError):
    exit_code = 3


class GradientCheckFailed(RsuperError):
    exit_code = 4


class DivergenceDetected(RsuperError):
    exit_code = 5
