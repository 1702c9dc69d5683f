"""Shared exception types. CLI exit codes map onto these."""


class DualrefError(Exception):
    """Base class for all package errors."""


class ConfigError(DualrefError):
    """Bad configuration: unknown key, unparsable value, bad flag combination."""


class DataError(DualrefError):
    """Invalid or inconsistent input data (files, manifests, sample pools)."""


class FormatError(DataError):
    """A binary or text file does not match its documented format."""


class NumericError(DualrefError):
    """A NaN or Inf appeared where only finite values are allowed."""
