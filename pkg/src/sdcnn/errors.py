"""Exceptions raised by sdcnn.

All errors derive from :class:`SdCnnError`. Errors caused by bad input also derive
from :class:`ValueError`, so callers that only care about "bad value" can keep
catching that.
"""

from __future__ import annotations


class SdCnnError(Exception):
    """Base class of every error raised by this package."""


class InvalidAnnotationError(SdCnnError, ValueError):
    """A lesion contour is empty, too short or outside its image."""


class BoundsError(SdCnnError, ValueError):
    """A box or window does not fit into its image."""


class ShapeError(SdCnnError, ValueError):
    """Array dimensions do not match what an operation requires."""


class ConfigurationError(SdCnnError, ValueError):
    """A configuration value is out of range or inconsistent."""


class EmptyMaskError(SdCnnError, ValueError):
    """No admissible pixel is left to sample training patches from."""


class WeightLoadError(SdCnnError, ValueError):
    """A weight container cannot be read."""


class MissingTensorError(WeightLoadError):
    """The weight manifest lacks a tensor the network needs."""

    def __init__(self, name: str) -> None:
        """Name the missing tensor."""
        super().__init__(f"weight manifest is missing tensor {name!r}")
        self.name = name


class TensorShapeError(WeightLoadError):
    """A tensor in the weight manifest has an unexpected shape."""


class TruncatedBlobError(WeightLoadError):
    """The weight blob is shorter than its manifest declares."""


class DegenerateLabelsError(SdCnnError, ValueError):
    """Only one class is present where two are required."""


class DomainError(SdCnnError, ValueError):
    """An argument lies outside the domain of a function."""


class UndefinedMetricError(SdCnnError, ValueError):
    """A metric is undefined for the given data (e.g. AUC with one class)."""


class TaggingError(SdCnnError, ValueError):
    """A feature lacks a provenance tag, or a tag cannot be parsed."""


class DataCompletenessError(SdCnnError, ValueError):
    """Cases lack an image source or view an operation requires."""

    def __init__(self, msg: str, case_ids: list[str] | None = None) -> None:
        """Keep the offending case ids next to the message."""
        self.case_ids = sorted(case_ids or [])
        if self.case_ids:
            msg = f"{msg}: {', '.join(self.case_ids)}"
        super().__init__(msg)


class NonFiniteFeatureError(SdCnnError, ValueError):
    """A feature matrix contains NaN or infinite values."""


class ManifestError(SdCnnError, ValueError):
    """A dataset manifest is malformed."""


class ContractViolationError(SdCnnError, ValueError):
    """A table handed across a function boundary violates its contract."""


class LockError(SdCnnError):
    """Another command holds the output directory."""


class TrainingDivergenceError(SdCnnError, ArithmeticError):
    """Training produced a non-finite loss, gradient or parameter."""
