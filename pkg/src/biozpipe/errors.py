"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
numerical failures exit 3, file-format and I/O problems exit 4.
"""


class BiozError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(BiozError):
    """Invalid configuration, geometry parameters, or CLI usage."""


class MeshError(BiozError):
    """Mesh construction produced a non-conforming or degenerate mesh."""


class SolverError(BiozError):
    """Forward-solver assembly or factorization failure."""


class NumericalError(BiozError):
    """Non-finite value encountered during network evaluation or training."""


class FormatError(BiozError):
    """Corrupt or unrecognized on-disk file."""
