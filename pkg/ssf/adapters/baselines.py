import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.stats import truncnorm

from core.config import Config
from core.errors import ConfigError, ShapeError
from ssf.checkpoint import Checkpoint
from ssf.model.graph import LayerGraph, block_site_id
from ssf.tensor import Tensor, ops
from .ssf_ada import SsfConfig, attach

logger = logging.getLogger(__name__)

METHODS = ("full", "linear", "bias", "adapter", "vpt_shallow", "vpt_deep", "ssf")
HEAD = ("head.weight", "head.bias")


@dataclass(frozen=True)
class MethodConfig:
    """Active fine-tuning strategy and its hyper-parameters.

    ``lr``, ``weight_decay``, ``epochs`` and ``warmup_epochs`` override the
    TrainConfig values when set.
    """

    method: str = "ssf"
    adapter_dim: int = 8
    adapter_bias: bool = False
    prompts: int = 10
    ssf: SsfConfig = field(default_factory=SsfConfig)
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    epochs: Optional[int] = None
    warmup_epochs: Optional[int] = None

    def validate(self, d: Optional[int] = None) -> "MethodConfig":
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method '{self.method}', expected one of {METHODS}")
        if self.method == "adapter":
            if self.adapter_dim < 1 or (d is not None and self.adapter_dim >= d):
                raise ConfigError(f"adapter needs 1 <= d' < d, got d'={self.adapter_dim} d={d}")
        if self.method in ("vpt_shallow", "vpt_deep") and self.prompts < 1:
            raise ConfigError(f"VPT needs n >= 1 prompts, got {self.prompts}")
        if self.method == "ssf":
            self.ssf.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ssf"] = self.ssf.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MethodConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("ssf"), dict):
            known["ssf"] = SsfConfig.from_dict(known["ssf"])
        return cls(**known)


@dataclass
class MethodState:
    """What a method adds to a forward pass, and what it trains"""

    method: MethodConfig
    hooks: Dict[str, Any]
    prompts: Dict[int, Tensor]
    trainable: List[str]


def adapter_forward(x: Tensor, w_down: Tensor, w_up: Tensor,
                    b_down: Optional[Tensor] = None, b_up: Optional[Tensor] = None) -> Tensor:
    """x + W_up · GELU(W_down · x), per token"""
    d = x.shape[-1]
    if w_down.ndim != 2 or w_up.ndim != 2 or w_down.shape[1] != d or w_up.shape != (d, w_down.shape[0]):
        raise ShapeError(f"adapter: input {list(x.shape)} with down {list(w_down.shape)} / up {list(w_up.shape)}")
    h = ops.gelu(ops.linear(x, w_down, b_down))
    return ops.add(x, ops.linear(h, w_up, b_up))


def vpt_prepend(x: Tensor, prompts: Tensor) -> Tensor:
    """Append n prompt tokens after the (class + patch) tokens"""
    if prompts.ndim != 2 or prompts.shape[-1] != x.shape[-1]:
        raise ShapeError(f"vpt: prompts {list(prompts.shape)} do not match token width of {list(x.shape)}")
    if x.ndim == 3:
        prompts = ops.repeat_batch(prompts, x.shape[0])
    return ops.concat_tokens(x, prompts)


def adapter_names(layer: int, with_bias: bool) -> List[str]:
    names = [f"adapter.{layer}.down.weight", f"adapter.{layer}.up.weight"]
    if with_bias:
        names += [f"adapter.{layer}.down.bias", f"adapter.{layer}.up.bias"]
    return names


def prompt_name(layer: int) -> str:
    return f"prompts.{layer}"


def _dtype(params: Checkpoint):
    return params["head.weight"].dtype


def _trunc_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    values = truncnorm.rvs(-2.0, 2.0, scale=Config.INIT_STD, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def _add_adapters(params: Checkpoint, graph: LayerGraph, method: MethodConfig, seed: int) -> Dict[str, Any]:
    cfg = graph.config
    rng = np.random.default_rng(seed)
    dt = _dtype(params)
    hooks = {}
    for i in range(cfg.depth):
        down_w, up_w = adapter_names(i, False)
        if down_w not in params:
            # up starts at zero so the adapted block equals the pretrained one
            params.add(down_w, Tensor(_trunc_normal(rng, (method.adapter_dim, cfg.d), dt)))
            params.add(up_w, Tensor(np.zeros((cfg.d, method.adapter_dim), dtype=dt)))
            if method.adapter_bias:
                params.add(f"adapter.{i}.down.bias", Tensor(np.zeros(method.adapter_dim, dtype=dt)))
                params.add(f"adapter.{i}.up.bias", Tensor(np.zeros(cfg.d, dtype=dt)))
        hooks[block_site_id(i, "fc2")] = _adapter_hook(params, i, method.adapter_bias)
    return hooks


def _adapter_hook(params: Checkpoint, layer: int, with_bias: bool):
    def hook(x: Tensor) -> Tensor:
        b_down = params[f"adapter.{layer}.down.bias"] if with_bias else None
        b_up = params[f"adapter.{layer}.up.bias"] if with_bias else None
        return adapter_forward(x, params[f"adapter.{layer}.down.weight"], params[f"adapter.{layer}.up.weight"],
                               b_down, b_up)
    return hook


def _add_prompts(params: Checkpoint, graph: LayerGraph, method: MethodConfig, seed: int) -> Dict[int, Tensor]:
    cfg = graph.config
    rng = np.random.default_rng(seed)
    layers = range(cfg.depth) if method.method == "vpt_deep" else range(1)
    prompts = {}
    for i in layers:
        name = prompt_name(i)
        if name not in params:
            params.add(name, Tensor(_trunc_normal(rng, (method.prompts, cfg.d), _dtype(params))))
        prompts[i] = params[name]
    return prompts


def freezing_policy(method: MethodConfig, params: Checkpoint) -> List[str]:
    """Names of the tensors the method trains; everything else is frozen"""
    names = params.names()
    kind = method.method
    if kind == "full":
        return [n for n in names if not n.startswith("ssf.")]
    if kind == "linear":
        return list(HEAD)
    if kind == "bias":
        backbone_biases = [n for n in names
                           if n.endswith(".bias") and not n.startswith(("head.", "adapter.", "ssf."))]
        return backbone_biases + list(HEAD)
    if kind == "adapter":
        return [n for n in names if n.startswith("adapter.")] + list(HEAD)
    if kind in ("vpt_shallow", "vpt_deep"):
        return [n for n in names if n.startswith("prompts.")] + list(HEAD)
    if kind == "ssf":
        return [n for n in names
                if n.startswith("ssf.") and not params.is_frozen(n)] + list(HEAD)
    raise ConfigError(f"Unknown method '{kind}'")


def prepare_method(params: Checkpoint, graph: LayerGraph, method: MethodConfig, seed: int = 0) -> MethodState:
    """Add the method's tensors to ``params``, apply its freezing policy and build hooks/prompts"""
    method.validate(graph.config.d)
    hooks: Dict[str, Any] = {}
    prompts: Dict[int, Tensor] = {}

    if method.method == "ssf":
        attachment = attach(graph, method.ssf, params, seed=seed)
        hooks = attachment.hooks
        trainable = attachment.trainable
    else:
        if method.method == "adapter":
            hooks = _add_adapters(params, graph, method, seed)
        elif method.method in ("vpt_shallow", "vpt_deep"):
            prompts = _add_prompts(params, graph, method, seed)
        trainable = freezing_policy(method, params)

    params.set_trainable(trainable)
    params.metadata["method"] = method.to_dict()
    logger.info(f"Method {method.method}: {params.num_params(trainable)} trainable / {params.num_params()} total params")
    return MethodState(method=method, hooks=hooks, prompts=prompts, trainable=trainable)


def restore_method(params: Checkpoint, graph: LayerGraph) -> MethodState:
    """Rebuild hooks and prompts for a checkpoint from its manifest metadata"""
    method = MethodConfig.from_dict(params.metadata.get("method", {"method": "full"}))
    frozen_before = {n: params.is_frozen(n) for n in params.names()}
    state = prepare_method(params, graph, method)
    for name, frozen in frozen_before.items():
        params.entries[name].frozen = frozen
        params[name].requires_grad = not frozen
    return state
