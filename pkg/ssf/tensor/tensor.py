"""Dense numpy-backed tensors and the reverse-mode tape"""
import threading
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import Config
from core.errors import ContractError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}

ArrayLike = Union[np.ndarray, Sequence, float, int]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def resolve_dtype(dtype: Union[str, np.dtype, type, None]) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"Unsupported dtype: {dtype}")
    return resolved


def dtype_tag(dtype: np.dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Tensor:
    """Dense n-dimensional array of reals with an optional gradient slot"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Union[str, np.dtype, None] = None, name: Optional[str] = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = np.array(data, copy=True, order="C")
        else:
            arr = np.array(data, dtype=resolve_dtype(dtype), copy=True, order="C")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None
        self._node: Optional["Node"] = None

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it"""
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            # 0-d arrays are always contiguous, so scalars stay 0-d
            arr = np.ascontiguousarray(arr)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype: Union[str, np.dtype]) -> "Tensor":
        return Tensor(self.data.astype(resolve_dtype(dtype)), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={dtype_tag(self.dtype)}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class Tape:
    """Ordered record of differentiable ops for one training step.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order, which keeps the
    record topological by construction.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, grad_fn: GradFn) -> None:
        node = Node(op, inputs, output, grad_fn)
        output.requires_grad = True
        output._tape = self
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            grad_out = pending.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.grad_fn(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._node is not None and tensor._tape is self:
                    key = id(tensor)
                    pending[key] = grad if key not in pending else pending[key] + grad
                else:
                    key = id(tensor)
                    if key in leaves:
                        leaves[key] = (tensor, leaves[key][1] + grad)
                    else:
                        leaves[key] = (tensor, grad)

        for tensor, grad in leaves.values():
            grad = np.array(grad, dtype=tensor.dtype, copy=True).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _stack() -> List[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Tuple[Tensor, ...], output: Tensor, grad_fn: GradFn) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient"""
    if Config.DEBUG_NUMERICS and not np.all(np.isfinite(output.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            logger.error(f"Non-finite output from {op} with finite inputs")
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, output, grad_fn)
    return output


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable leaf reachable from ``loss``"""
    if loss._tape is None:
        raise ContractError("loss was not produced on an active tape")
    loss._tape.backward(loss)
