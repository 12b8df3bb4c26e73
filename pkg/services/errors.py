"""Exception hierarchy shared by the services."""


class InfoFlowError(Exception):
    """Base class for toolkit errors."""


class DimensionError(InfoFlowError, ValueError):
    """Tensor shapes do not agree."""


class DegenerateRowError(InfoFlowError, ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(InfoFlowError, ValueError):
    """A documented precondition was violated by the caller."""


class CapacityError(InfoFlowError, ValueError):
    """Assembled sequence does not fit the model."""


class CheckpointError(InfoFlowError):
    """Checkpoint container is malformed or does not match the model."""
