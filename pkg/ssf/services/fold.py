"""Fold trained SSF factors into the frozen weights they follow (computed in float64)"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.config import Config
from core.errors import FoldError, ShapeError, VerificationError
from core.metrics import fold_deviation_gauge, folds_total, verification_failures
from ssf.adapters.baselines import restore_method
from ssf.adapters.ssf_ada import beta_name, gamma_name
from ssf.checkpoint import Checkpoint
from ssf.model.graph import FoldTarget, LayerGraph
from ssf.model.vit import PRETRAINED_METHOD, forward, is_head
from ssf.tensor import Tensor, dtype_tag

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldStep:
    site_id: str
    target: FoldTarget
    out_dim: int


@dataclass
class FoldPlan:
    """Ordered sites to fold, each with the parameters that absorb it"""

    steps: List[FoldStep]

    def __len__(self) -> int:
        return len(self.steps)

    def site_ids(self) -> List[str]:
        return [s.site_id for s in self.steps]

    def to_list(self) -> List[Dict]:
        return [{"site_id": s.site_id, "target": asdict(s.target), "out_dim": s.out_dim} for s in self.steps]

    def digest(self) -> str:
        blob = json.dumps(self.to_list(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def ssf_site_ids(params: Checkpoint) -> List[str]:
    """Site ids with at least one ``ssf.*`` tensor, in checkpoint order"""
    seen: List[str] = []
    for name in params.names():
        if not name.startswith("ssf."):
            continue
        site_id = name[len("ssf."):].rsplit(".", 1)[0]
        if site_id not in seen:
            seen.append(site_id)
    return seen


def build_fold_plan(graph: LayerGraph, params: Checkpoint) -> FoldPlan:
    """Plan covering every SSF site present in ``params``, in forward order"""
    present = set(ssf_site_ids(params))
    unknown = sorted(present - {s.site_id for s in graph})
    if unknown:
        raise FoldError(f"SSF tensors for sites outside the model graph: {', '.join(unknown)}")
    steps = []
    for site in graph:
        if site.site_id not in present:
            continue
        if site.target is None:
            raise FoldError(f"Site {site.site_id} has no preceding linear op to fold into")
        steps.append(FoldStep(site.site_id, site.target, site.out_dim))
    return FoldPlan(steps)


def _as64(t: Tensor) -> np.ndarray:
    return np.asarray(t.data, dtype=np.float64)


def _factors(gamma: Tensor, beta: Tensor, out_dim: int, where: str) -> Tuple[np.ndarray, np.ndarray]:
    if beta.shape != (out_dim,) or gamma.shape not in ((out_dim,), (1,)):
        raise ShapeError(f"{where}: gamma {list(gamma.shape)} / beta {list(beta.shape)} "
                         f"do not match output dim {out_dim}")
    return _as64(gamma), _as64(beta)


def fold_linear(weight: Tensor, bias: Tensor, gamma: Tensor, beta: Tensor) -> Tuple[Tensor, Tensor]:
    """W'[c, :] = gamma[c] * W[c, :]; b' = gamma * b + beta"""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"fold_linear: weight {list(weight.shape)} with bias {list(bias.shape)}")
    g, b = _factors(gamma, beta, weight.shape[0], "fold_linear")
    w_new = g[:, None] * _as64(weight)
    b_new = g * _as64(bias) + b
    return Tensor(w_new.astype(weight.dtype)), Tensor(b_new.astype(bias.dtype))


def fold_layernorm(weight: Tensor, bias: Tensor, gamma: Tensor, beta: Tensor) -> Tuple[Tensor, Tensor]:
    """g' = gamma * g; b' = gamma * b + beta"""
    if weight.ndim != 1 or bias.shape != weight.shape:
        raise ShapeError(f"fold_layernorm: weight {list(weight.shape)} with bias {list(bias.shape)}")
    g, b = _factors(gamma, beta, weight.shape[0], "fold_layernorm")
    return (Tensor((g * _as64(weight)).astype(weight.dtype)),
            Tensor((g * _as64(bias) + b).astype(bias.dtype)))


def fold_embedding(weight: Tensor, bias: Tensor, cls_token: Tensor, pos_embed: Tensor,
                   gamma: Tensor, beta: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Fold a site on ``concat(cls, patches W^T + b) + pos``.

    Patch rows get ``gamma * W``, ``gamma * b + beta`` and ``gamma * pos``;
    the class row has no bias term, so ``beta`` moves into the class token.
    """
    d = weight.shape[0]
    if cls_token.shape != (1, d) or pos_embed.ndim != 2 or pos_embed.shape[1] != d:
        raise ShapeError(f"fold_embedding: weight {list(weight.shape)}, cls {list(cls_token.shape)}, "
                         f"pos {list(pos_embed.shape)}")
    w_new, b_new = fold_linear(weight, bias, gamma, beta)
    g, b = _factors(gamma, beta, d, "fold_embedding")
    cls_new = g * _as64(cls_token) + b
    pos_new = g * _as64(pos_embed)
    return w_new, b_new, Tensor(cls_new.astype(cls_token.dtype)), Tensor(pos_new.astype(pos_embed.dtype))


def _fold_step(out: Checkpoint, step: FoldStep, gamma: Tensor, beta: Tensor) -> None:
    target = step.target
    for name in (target.weight_name, target.bias_name) + target.extra_names:
        if name not in out:
            raise FoldError(f"{step.site_id}: fold target tensor '{name}' missing from checkpoint")
    w, b = out[target.weight_name], out[target.bias_name]
    if target.kind == "linear":
        w_new, b_new = fold_linear(w, b, gamma, beta)
    elif target.kind == "layernorm_affine":
        w_new, b_new = fold_layernorm(w, b, gamma, beta)
    elif target.kind == "embedding":
        cls_name, pos_name = target.extra_names
        w_new, b_new, cls_new, pos_new = fold_embedding(w, b, out[cls_name], out[pos_name], gamma, beta)
        out.add(cls_name, cls_new)
        out.add(pos_name, pos_new)
    else:
        raise FoldError(f"{step.site_id}: unknown fold target kind '{target.kind}'")
    out.add(target.weight_name, w_new)
    out.add(target.bias_name, b_new)


def weight_stats(params: Checkpoint, names: Optional[List[str]] = None) -> Dict[str, Dict[str, float]]:
    """Mean / std per tensor, for comparing distributions before and after a fold"""
    selected = params.names() if names is None else names
    return {n: {"mean": float(params[n].data.mean()), "std": float(params[n].data.std())} for n in selected}


def fold_checkpoint(ckpt_train: Checkpoint, plan: FoldPlan) -> Checkpoint:
    """Inference checkpoint with every planned SSF site absorbed.

    Refuses to fold when there is nothing to fold, when a planned site is
    missing a factor, or when an ``ssf.*`` tensor falls outside the plan.
    """
    present = ssf_site_ids(ckpt_train)
    if not present:
        raise FoldError("Checkpoint has no ssf.* tensors, nothing to fold")
    leftovers = [n for n in ckpt_train.names() if n.startswith(("adapter.", "prompts."))]
    if leftovers:
        raise FoldError(f"Only SSF factors can be folded; found {', '.join(leftovers[:4])}")
    dangling = sorted(set(present) - set(plan.site_ids()))
    if dangling:
        raise FoldError(f"ssf.* tensors not covered by the fold plan: {', '.join(dangling)}")

    out = Checkpoint()
    for name, entry in ckpt_train.items():
        if not name.startswith("ssf."):
            out.add(name, Tensor(entry.tensor.data), frozen=False)

    for step in plan.steps:
        g_name, b_name = gamma_name(step.site_id), beta_name(step.site_id)
        if g_name not in ckpt_train or b_name not in ckpt_train:
            raise FoldError(f"Site {step.site_id}: missing SSF tensor "
                            f"{g_name if g_name not in ckpt_train else b_name}")
        _fold_step(out, step, ckpt_train[g_name], ckpt_train[b_name])
        logger.debug(f"Folded {step.site_id} into {step.target.weight_name} ({step.target.kind})")

    metadata = {k: v for k, v in ckpt_train.metadata.items() if k != "method"}
    metadata["method"] = dict(PRETRAINED_METHOD)
    metadata["fold"] = {
        "source_digest": ckpt_train.digest(),
        "plan_hash": plan.digest(),
        "sites": len(plan),
        "source_method": ckpt_train.metadata.get("method", {}),
    }
    out.metadata = metadata
    folds_total.inc()
    logger.info(f"Folded {len(plan)} SSF sites; {out.num_params()} params remain "
                f"({ckpt_train.num_params() - out.num_params()} absorbed)")
    return out


def verify_fold(ckpt_train: Checkpoint, ckpt_folded: Checkpoint, graph: LayerGraph,
                n_samples: int = 50, seed: int = 0) -> float:
    """Max |logit(hooked) - logit(folded)| over ``n_samples`` random images"""
    cfg = graph.config
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n_samples, cfg.channels, cfg.image_side, cfg.image_side))

    hooked = ckpt_train.copy()
    state = restore_method(hooked, graph)
    deviation = 0.0
    for start in range(0, n_samples, 16):
        batch = images[start:start + 16]
        reference = forward(hooked, graph, batch, state.hooks, state.prompts).data
        folded = forward(ckpt_folded, graph, batch).data
        deviation = max(deviation, float(np.max(np.abs(reference.astype(np.float64) - folded))))

    fold_deviation_gauge.set(deviation)
    logger.info(f"Fold verification over {n_samples} inputs: max |dlogit| = {deviation:.3e}")
    return deviation


def check_fold_tolerance(deviation: float, dtype) -> None:
    """Raise VerificationError when a measured fold deviation exceeds the dtype tolerance"""
    tag = dtype if isinstance(dtype, str) else dtype_tag(dtype)
    tolerance = Config.fold_tolerance(tag)
    if deviation > tolerance:
        verification_failures.inc()
        logger.error(f"Fold deviation {deviation:.3e} exceeds {tag} tolerance {tolerance:.0e}")
        raise VerificationError(f"Folded logits deviate by {deviation:.3e} (> {tolerance:.0e})",
                                deviation, tolerance)


def head_untouched(ckpt_train: Checkpoint, ckpt_folded: Checkpoint) -> bool:
    return all(ckpt_train.tensor_hash(n) == ckpt_folded.tensor_hash(n) for n in ckpt_train.names() if is_head(n))
