"""Exception types shared across the package.

Every error raised on purpose by this package derives from :class:`MlcilError`,
so callers can catch one base type at the CLI boundary. The subclasses keep
the usual builtin bases (ValueError, IndexError, RuntimeError) so generic
handlers keep working.
"""


class MlcilError(Exception):
    """Base class for all package errors."""


class ShapeError(MlcilError, ValueError):
    """Operand shapes or arities do not line up."""


class BoundsError(MlcilError, IndexError):
    """A slice or index falls outside the tensor extents."""


class NumericError(MlcilError, ValueError):
    """Domain violation: non-finite input, log of a non-positive value, etc."""


class ContractError(MlcilError, ValueError):
    """An API precondition was violated (non-scalar loss, mismatched lengths...)."""


class StateError(MlcilError, RuntimeError):
    """Operation called in the wrong lifecycle state."""


class RegistryError(MlcilError, ValueError):
    """A class id was registered twice."""


class ProtocolError(MlcilError, ValueError):
    """Invalid session protocol parameters."""


class ConfigError(MlcilError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DatasetError(MlcilError, ValueError):
    """Dataset generation or session assignment produced an unusable result."""


class MetricError(MlcilError, ValueError):
    """A metric was asked to evaluate degenerate input it cannot define."""


class CheckpointError(MlcilError, ValueError):
    """Checkpoint file is unreadable, corrupt, or has the wrong schema version."""


class TrainingDiverged(MlcilError, RuntimeError):
    """Training produced a non-finite loss; a diagnostic dump was written."""
