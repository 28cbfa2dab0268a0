"""Spectrogram-conditioned time-domain speech separation toolkit."""

from .errors import FormatError, InvalidArgument, NumericError

__all__ = ["FormatError", "InvalidArgument", "NumericError"]
__version__ = "0.1.0"
