"""Exception types shared across the package."""


class PotQuantError(Exception):
    """Base class for data and invariant errors (CLI exit code 2)."""


class FormatError(PotQuantError):
    """Malformed PTEN/POTQ file."""


class InvariantError(PotQuantError):
    """A quantization invariant would be violated."""


class DivergenceError(PotQuantError):
    """Calibration produced a non-finite loss."""
