"""Exception hierarchy shared across the package."""


class SparselabError(Exception):
    """Base class for all package errors."""


class ShapeError(SparselabError):
    """Tensor shapes incompatible with the requested operation."""


class NonFiniteError(SparselabError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(SparselabError):
    """Invalid or unresolvable experiment configuration."""


class ScheduleError(SparselabError):
    """Infeasible or out-of-range schedule request."""


class LayerCollapseError(SparselabError):
    """A sparsity target would zero out a layer that must stay nonzero."""


class CheckpointError(SparselabError):
    """Malformed checkpoint file."""


class DataError(SparselabError):
    """Malformed dataset file or empty input."""


class MaskMutationError(SparselabError):
    """A fixed mask changed during a run that must preserve it."""
