"""Exception hierarchy. Each family maps to a CLI exit code."""

from __future__ import annotations


class FairprobeError(Exception):
    exit_code = 1
    code = "E_GENERIC"


class ConfigError(FairprobeError, ValueError):
    exit_code = 2
    code = "E_CONFIG"


class DataError(FairprobeError, ValueError):
    exit_code = 3
    code = "E_DATA"


class NumericError(FairprobeError, ArithmeticError):
    exit_code = 4
    code = "E_NUMERIC"


class HeaderError(DataError):
    """Corrupt or unrecognised file header (manifest columns or binary magic)."""

    code = "E_HEADER"


class AlignmentError(DataError):
    """Manifest rows and embedding rows do not line up."""

    code = "E_ALIGN"


class DuplicateSampleError(DataError):
    code = "E_DUPLICATE"


class LabelDomainError(DataError):
    """A label token outside its allowed vocabulary."""

    code = "E_LABEL"


class EmptySelectionError(DataError):
    code = "E_EMPTY"


class DimensionError(DataError):
    code = "E_DIM"
