"""Exception types shared across the package.

The CLI maps each of these to a single-line, machine-parsable error record
and a nonzero exit code.
"""


class VsrppError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(VsrppError, ValueError):
    """Tensor shapes or channel counts do not satisfy an operation's contract."""


class NumericsError(VsrppError, ArithmeticError):
    """A kernel produced NaN or Inf from finite inputs."""


class GraphError(VsrppError, RuntimeError):
    """Misuse of the reverse-mode graph (e.g. backward on a non-scalar)."""


class ConfigError(VsrppError, ValueError):
    """Invalid or inconsistent network/run configuration."""


class WeightFormatError(VsrppError, ValueError):
    """Weight file is malformed or incompatible with the requested config."""


class ClipFormatError(VsrppError, ValueError):
    """Clip directory or frame file violates the storage contract."""


class TrainingDiverged(VsrppError, RuntimeError):
    """Loss became non-finite during training; carries the offending batch seed."""

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed
