"""Memory-enhanced global-local aggregation for streaming video object detection."""

from .errors import ContractViolation, DataError, NumericError

__version__ = "0.1.0"
