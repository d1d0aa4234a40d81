from .tensor import DTYPES, Tape, Tensor, active_tape, backward, dtype_tag, resolve_dtype
from . import ops

__all__ = ["DTYPES", "Tape", "Tensor", "active_tape", "backward", "dtype_tag", "resolve_dtype", "ops"]
