"""AdamW with decoupled weight decay and the warmup + cosine schedule"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from core.config import Config
from core.errors import ContractError, ShapeError
from ssf.checkpoint import Checkpoint

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then half-cosine decay to 0"""
    if step < 0 or total_steps < 1:
        raise ContractError(f"lr_at: step {step} of {total_steps} is out of range")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = min((step - warmup_steps) / max(1, total_steps - warmup_steps), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, wd: float,
               betas: Tuple[float, float] = (Config.ADAM_BETA1, Config.ADAM_BETA2),
               eps: float = Config.ADAM_EPS) -> None:
    """One in-place AdamW update of ``param``"""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adamw_step: param {list(param.shape)}, grad {list(grad.shape)}, "
                         f"state {list(state.m.shape)}")
    beta1, beta2 = betas
    state.step += 1
    if wd:
        param *= 1.0 - lr * wd
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


NO_DECAY = ("cls_token", "pos_embed")
NO_DECAY_PREFIXES = ("ssf.", "prompts.")


def decays(name: str, param: np.ndarray) -> bool:
    """Weight decay only on projection matrices"""
    return param.ndim >= 2 and name not in NO_DECAY and not name.startswith(NO_DECAY_PREFIXES)


@dataclass
class AdamW:
    """Optimizer over the trainable tensors of a checkpoint.

    State is allocated only for the names it is given, so memory follows the
    trainable set of the method rather than the backbone size.
    """

    params: Checkpoint
    names: Tuple[str, ...]
    weight_decay: float = 0.0
    decay_all: bool = False
    state: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.names:
            if self.params.is_frozen(name):
                raise ContractError(f"AdamW: '{name}' is frozen and cannot be optimized")
            data = self.params[name].data
            self.state[name] = AdamState(np.zeros_like(data), np.zeros_like(data))
        logger.debug(f"AdamW tracking {len(self.names)} tensors, {self.state_size()} state values")

    @classmethod
    def for_trainable(cls, params: Checkpoint, weight_decay: float = 0.0, decay_all: bool = False) -> "AdamW":
        return cls(params, tuple(params.trainable_names()), weight_decay, decay_all)

    def state_size(self) -> int:
        return int(sum(s.m.size + s.v.size for s in self.state.values()))

    def step(self, lr: float, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        for name in self.names:
            tensor = self.params[name]
            grad = tensor.grad if grads is None else grads.get(name)
            if grad is None:
                grad = np.zeros_like(tensor.data)
            wd = self.weight_decay if (self.decay_all or decays(name, tensor.data)) else 0.0
            adamw_step(tensor.data, grad, self.state[name], lr, wd)

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for name in (self.names if names is None else names):
            self.params[name].zero_grad()
