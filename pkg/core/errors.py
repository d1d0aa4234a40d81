from typing import Any, Dict, Optional


class SsfError(Exception):
    """Base class for every toolkit error"""


class ShapeError(SsfError):
    """Tensor extents do not fit the operation"""


class ContractError(SsfError):
    """An operation precondition was violated"""


class NumericalError(SsfError):
    """Non-finite value produced from finite inputs (debug numerics only)"""


class ConfigError(SsfError):
    """Invalid model, method, SSF or training configuration"""


class GraphError(SsfError):
    """Reference to a site that the layer graph does not contain"""


class CheckpointFormatError(SsfError):
    """Malformed checkpoint or tensor file"""


class FoldError(SsfError):
    """Re-parameterization refused"""


class TrainingDivergedError(SsfError):
    """Loss became non-finite during training"""

    def __init__(self, message: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.dump = dump or {}


class FrozenWeightsMutatedError(SsfError):
    """A tensor outside the trainable set changed during training"""


class VerificationError(SsfError):
    """A numerical check ran but exceeded its tolerance"""

    def __init__(self, message: str, measured: float, tolerance: float):
        super().__init__(message)
        self.measured = measured
        self.tolerance = tolerance
