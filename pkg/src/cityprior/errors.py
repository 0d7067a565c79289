"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""

from __future__ import annotations


class CityPriorError(Exception):
    """Base class for all library errors."""


class DataError(CityPriorError):
    """Malformed, missing, or inconsistent input data."""

    def __init__(self, message: str, frame_id: int | None = None):
        self.frame_id = frame_id
        if frame_id is not None:
            message = f"frame {frame_id}: {message}"
        super().__init__(message)


class ManifestError(DataError):
    pass


class PriorFormatError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericalError(CityPriorError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, term: str | None = None):
        self.term = term
        super().__init__(message)
