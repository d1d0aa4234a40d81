"""ViT encoder: patch embed, pre-norm blocks, final LN, head. Each graph site may be replaced by a hook."""
import logging
from collections import OrderedDict
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from core.config import Config
from core.errors import ConfigError, ShapeError
from ssf.checkpoint import Checkpoint
from ssf.tensor import Tensor, ops, resolve_dtype
from .config import ModelConfig
from .graph import LayerGraph, build_graph

logger = logging.getLogger(__name__)

Hook = Callable[[Tensor], Tensor]
Hooks = Dict[str, Hook]
Prompts = Dict[int, Tensor]

PRETRAINED_METHOD = {"method": "full"}


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape of every backbone and head parameter, in forward order"""
    d, hidden = cfg.d, cfg.mlp_hidden
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["patch_embed.weight"] = (d, cfg.patch_dim)
    shapes["patch_embed.bias"] = (d,)
    shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (cfg.tokens, d)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        shapes[f"{p}.ln1.weight"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.attn.qkv.weight"] = (3 * d, d)
        shapes[f"{p}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{p}.attn.proj.weight"] = (d, d)
        shapes[f"{p}.attn.proj.bias"] = (d,)
        shapes[f"{p}.ln2.weight"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (hidden, d)
        shapes[f"{p}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{p}.mlp.fc2.weight"] = (d, hidden)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (cfg.num_classes, d)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def is_head(name: str) -> bool:
    return name.startswith("head.")


def is_bias(name: str) -> bool:
    """1-D bias terms, including LayerNorm shifts"""
    return name.endswith(".bias")


def count_backbone_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for n, s in parameter_shapes(cfg.validate()).items() if not is_head(n)))


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32, mean: float = 0.0) -> np.ndarray:
    """Normal(mean, std²) truncated at ±2σ"""
    values = truncnorm.rvs(-2.0, 2.0, loc=mean, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def init_tensor(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "norm.weight":
        return np.ones(shape, dtype=dtype)
    if is_bias(name):
        return np.zeros(shape, dtype=dtype)
    return trunc_normal(rng, shape, Config.INIT_STD, dtype)


def build_model(cfg: ModelConfig, dtype: Union[str, np.dtype] = "f32") -> Tuple[Checkpoint, LayerGraph]:
    """Deterministically initialize a backbone from ``cfg.seed``"""
    cfg.validate()
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(cfg.seed)
    params = Checkpoint(metadata={"model_config": cfg.to_dict(), "method": dict(PRETRAINED_METHOD)})
    for name, shape in parameter_shapes(cfg).items():
        params.add(name, Tensor(init_tensor(name, shape, rng, dt), requires_grad=True), frozen=False)
    graph = build_graph(cfg)
    logger.debug(f"Built model: {len(params)} tensors, {params.num_params()} params, {len(graph)} sites")
    return params, graph


def load_graph(params: Checkpoint) -> LayerGraph:
    """Rebuild the site graph a checkpoint was built with"""
    if "model_config" not in params.metadata:
        raise ConfigError("Checkpoint metadata carries no model_config")
    return build_graph(ModelConfig.from_dict(params.metadata["model_config"]))


def _apply(hooks: Hooks, site_id: str, x: Tensor) -> Tensor:
    hook = hooks.get(site_id)
    return hook(x) if hook is not None else x


def attention_block(x: Tensor, wqkv: Tensor, bqkv: Tensor, wo: Tensor, bo: Tensor, heads: int,
                    scale: Optional[float] = None, qkv_hook: Optional[Hook] = None,
                    proj_hook: Optional[Hook] = None) -> Tensor:
    """Multi-head self-attention over [B, T, d] (or [T, d]) tokens"""
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + tuple(x.shape))
    if x.ndim != 3:
        raise ShapeError(f"attention_block: expected [B, T, d] tokens, got {list(x.shape)}")
    b, t, d = x.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"attention_block: width {d} is not divisible by {heads} heads")
    dh = d // heads
    scale = dh ** -0.5 if scale is None else scale

    qkv = ops.linear(x, wqkv, bqkv)
    if qkv_hook is not None:
        qkv = qkv_hook(qkv)
    qkv = ops.transpose(ops.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ops.select(qkv, i) for i in range(3))

    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), scale)
    out = ops.matmul(ops.softmax_rows(scores), v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = ops.linear(out, wo, bo)
    if proj_hook is not None:
        out = proj_hook(out)
    if squeeze:
        out = ops.reshape(out, (t, d))
    return out


def _block(params: Checkpoint, cfg: ModelConfig, i: int, x: Tensor, hooks: Hooks) -> Tensor:
    p = f"blocks.{i}"
    h = ops.layernorm(x, params[f"{p}.ln1.weight"], params[f"{p}.ln1.bias"], Config.LN_EPS)
    h = _apply(hooks, f"{p}.ln1", h)
    h = attention_block(h, params[f"{p}.attn.qkv.weight"], params[f"{p}.attn.qkv.bias"],
                        params[f"{p}.attn.proj.weight"], params[f"{p}.attn.proj.bias"],
                        cfg.heads, cfg.attention_scale,
                        qkv_hook=hooks.get(f"{p}.qkv"), proj_hook=hooks.get(f"{p}.attn_proj"))
    x = ops.add(x, h)

    h = ops.layernorm(x, params[f"{p}.ln2.weight"], params[f"{p}.ln2.bias"], Config.LN_EPS)
    h = _apply(hooks, f"{p}.ln2", h)
    h = _apply(hooks, f"{p}.fc1", ops.linear(h, params[f"{p}.mlp.fc1.weight"], params[f"{p}.mlp.fc1.bias"]))
    h = ops.gelu(h)
    h = _apply(hooks, f"{p}.fc2", ops.linear(h, params[f"{p}.mlp.fc2.weight"], params[f"{p}.mlp.fc2.bias"]))
    return ops.add(x, h)


def embed(params: Checkpoint, cfg: ModelConfig, images: np.ndarray) -> Tensor:
    """Patch projection, class token and positional table: [B, N²+1, d]"""
    batch = images.shape[0]
    patches = Tensor.wrap(ops.patchify(images, cfg.patch_side))
    tokens = ops.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    x = ops.concat_tokens(ops.repeat_batch(params["cls_token"], batch), tokens)
    return ops.add(x, params["pos_embed"])


def forward(params: Checkpoint, graph: LayerGraph, images: Union[np.ndarray, Tensor],
            hooks: Optional[Hooks] = None, prompts: Optional[Prompts] = None) -> Tensor:
    """Logits [B, num_classes] for images [B, C, H, W]"""
    from ssf.adapters.baselines import vpt_prepend

    cfg = graph.config
    hooks = hooks or {}
    graph.check_ids(hooks)

    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    expected = (cfg.channels, cfg.image_side, cfg.image_side)
    if arr.ndim != 4 or tuple(arr.shape[1:]) != expected:
        raise ShapeError(f"forward: images {list(arr.shape)} do not match [B, {', '.join(map(str, expected))}]")
    arr = arr.astype(params["patch_embed.weight"].dtype, copy=False)

    x = _apply(hooks, "embed", embed(params, cfg, arr))
    n_prompts = 0
    for i in range(cfg.depth):
        if prompts and i in prompts:
            if n_prompts:
                x = ops.slice_tokens(x, 0, x.shape[-2] - n_prompts)
            x = vpt_prepend(x, prompts[i])
            n_prompts = prompts[i].shape[0]
        x = _block(params, cfg, i, x, hooks)

    x = ops.layernorm(x, params["norm.weight"], params["norm.bias"], Config.LN_EPS)
    x = _apply(hooks, "final_ln", x)
    cls = ops.reshape(ops.slice_tokens(x, 0, 1), (arr.shape[0], cfg.d))
    logits = ops.linear(cls, params["head.weight"], params["head.bias"])
    return _apply(hooks, "head", logits)
