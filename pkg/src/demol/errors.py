"""Exception hierarchy shared across the package."""


class DemolError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DemolError):
    """Malformed molecule input (XYZ or JSON)."""


class UnknownElementError(DemolError):
    """Element symbol not present in the active covalent-radii table."""


class GeometryError(DemolError):
    """Degenerate geometry (zero-length bond, coincident atoms, ...)."""


class ShapeError(DemolError):
    """Tensor operation received incompatible shapes."""


class NonFiniteError(DemolError):
    """A tensor operation produced NaN or Inf."""


class MissingTargetError(DemolError):
    """A supervised loss was requested for a molecule without a target."""


class CheckpointError(DemolError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""


class TrainingError(DemolError):
    """Optimization aborted (non-finite loss or gradients)."""
