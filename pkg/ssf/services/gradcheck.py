import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.config import Config
from core.errors import ConfigError, VerificationError
from core.metrics import grad_error_gauge, verification_failures
from ssf.adapters.baselines import adapter_forward
from ssf.adapters.ssf_ada import SsfConfig, beta_name, gamma_name, init_ssf, select_sites, ssf_ada, SsfSite
from ssf.checkpoint import Checkpoint, CheckpointEntry
from ssf.model.config import preset
from ssf.model.vit import attention_block, build_model, forward
from ssf.tensor import Tape, Tensor, ops, resolve_dtype

logger = logging.getLogger(__name__)

STEP = 1e-5
CASES = ("ssf_ada", "linear", "layernorm", "gelu", "attention", "adapter", "cross_entropy", "model")

LossFn = Callable[[List[Tensor]], Tensor]


@dataclass
class GradCheckResult:
    case: str
    max_rel_error: float
    errors: Dict[str, float] = field(default_factory=dict)
    coords: int = 0

    def to_dict(self) -> Dict:
        return {"case": self.case, "max_rel_error": self.max_rel_error, "errors": self.errors, "coords": self.coords}


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12))


def check_gradients(fn: LossFn, inputs: Dict[str, np.ndarray], dtype: str = "f64", case: str = "custom",
                    max_coords: Optional[int] = None, seed: int = 0, h: float = STEP) -> GradCheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps a list of tensors (in ``inputs`` order) to a scalar. With
    ``max_coords`` only a random subset of each input's coordinates is checked.
    """
    names = list(inputs)
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)

    tensors = [Tensor(np.asarray(inputs[n], dtype=dt), requires_grad=True) for n in names]
    with Tape() as tape:
        loss = fn(tensors)
        tape.backward(loss)

    reference = [np.asarray(inputs[n], dtype=np.float64) for n in names]
    result = GradCheckResult(case, 0.0)
    for i, name in enumerate(names):
        flat = reference[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            saved = flat[c]
            flat[c] = saved + h
            plus = fn([Tensor(a) for a in reference]).item()
            flat[c] = saved - h
            minus = fn([Tensor(a) for a in reference]).item()
            flat[c] = saved
            numeric[j] = (plus - minus) / (2.0 * h)
        grad = tensors[i].grad
        analytic = np.zeros(coords.size) if grad is None else grad.reshape(-1)[coords].astype(np.float64)
        result.errors[name] = rel_error(analytic, numeric)
        result.coords += int(coords.size)
    result.max_rel_error = max(result.errors.values()) if result.errors else 0.0
    logger.debug(f"grad-check {case}: max rel error {result.max_rel_error:.3e} over {result.coords} coords")
    return result


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights> so every output element contributes"""
    return ops.sum_all(ops.mul(out, Tensor(weights.astype(out.dtype))))


def _case_inputs(case: str, rng: np.random.Generator):
    b, t, d, hidden, heads = 2, 5, 8, 12, 2
    x = rng.standard_normal((b, t, d))
    if case == "ssf_ada":
        proj = rng.standard_normal((b, t, d))
        return ({"x": x, "gamma": 1.0 + 0.1 * rng.standard_normal(d), "beta": 0.1 * rng.standard_normal(d)},
                lambda ts: _project(ssf_ada(ts[0], ts[1], ts[2]), proj))
    if case == "linear":
        proj = rng.standard_normal((b, t, hidden))
        return ({"x": x, "weight": 0.3 * rng.standard_normal((hidden, d)), "bias": rng.standard_normal(hidden)},
                lambda ts: _project(ops.linear(ts[0], ts[1], ts[2]), proj))
    if case == "layernorm":
        proj = rng.standard_normal((b, t, d))
        return ({"x": x, "weight": 1.0 + 0.1 * rng.standard_normal(d), "bias": 0.1 * rng.standard_normal(d)},
                lambda ts: _project(ops.layernorm(ts[0], ts[1], ts[2], Config.LN_EPS), proj))
    if case == "gelu":
        proj = rng.standard_normal((b, t, d))
        return {"x": x}, lambda ts: _project(ops.gelu(ts[0]), proj)
    if case == "attention":
        proj = rng.standard_normal((b, t, d))
        inputs = {"x": x, "wqkv": 0.3 * rng.standard_normal((3 * d, d)), "bqkv": 0.1 * rng.standard_normal(3 * d),
                  "wo": 0.3 * rng.standard_normal((d, d)), "bo": 0.1 * rng.standard_normal(d)}
        return inputs, lambda ts: _project(attention_block(ts[0], ts[1], ts[2], ts[3], ts[4], heads), proj)
    if case == "adapter":
        proj = rng.standard_normal((b, t, d))
        inputs = {"x": x, "down": 0.3 * rng.standard_normal((4, d)), "up": 0.3 * rng.standard_normal((d, 4))}
        return inputs, lambda ts: _project(adapter_forward(ts[0], ts[1], ts[2]), proj)
    if case == "cross_entropy":
        labels = rng.integers(0, d, size=b * t)
        return {"logits": x.reshape(b * t, d)}, lambda ts: ops.cross_entropy(ts[0], labels)
    raise ConfigError(f"Unknown grad-check case '{case}', expected one of {CASES}")


def _model_case(dtype: str, seed: int, max_coords: int) -> GradCheckResult:
    """End-to-end: toy model with SSF on every site, cross-entropy loss"""
    cfg = preset("toy", seed=seed)
    base, graph = build_model(cfg, "f64")
    rng = np.random.default_rng(seed)
    ssf_cfg = SsfConfig()
    sites = []
    for site in select_sites(graph, ssf_cfg):
        g = Tensor(np.ones(site.out_dim))
        b = Tensor(np.zeros(site.out_dim))
        base.add(gamma_name(site.site_id), g)
        base.add(beta_name(site.site_id), b)
        sites.append(SsfSite(site.site_id, g, b, site.target, site.out_dim))
    init_ssf(sites, "normal", seed, std=0.1)
    base.set_trainable([])
    bases = {np.dtype(np.float64): base, resolve_dtype(dtype): base.astype(dtype)}

    images = rng.standard_normal((2, cfg.channels, cfg.image_side, cfg.image_side))
    labels = rng.integers(0, cfg.num_classes, size=2)
    names = [n for n in base.names() if n.startswith("ssf.")][:6] + [
        "head.weight", "head.bias", "blocks.0.attn.qkv.weight", "blocks.1.mlp.fc1.bias", "pos_embed"]
    site_ids = [s.site_id for s in sites]

    def loss(ts: List[Tensor]) -> Tensor:
        source = bases[np.dtype(ts[0].dtype)]
        view = Checkpoint({n: CheckpointEntry(e.tensor) for n, e in source.items()}, source.metadata)
        for name, t in zip(names, ts):
            view.entries[name] = CheckpointEntry(t)
        hooks = {sid: (lambda x, sid=sid: ssf_ada(x, view[gamma_name(sid)], view[beta_name(sid)]))
                 for sid in site_ids}
        return ops.cross_entropy(forward(view, graph, images, hooks), labels)

    return check_gradients(loss, {n: base[n].data for n in names}, dtype, "model", max_coords, seed)


def run_grad_checks(seed: int = 0, dtype: str = "f64", cases: Optional[Sequence[str]] = None,
                    instances: int = 1, max_coords: int = 24) -> List[GradCheckResult]:
    """Run each case on ``instances`` random draws and keep the worst error per case"""
    results = []
    for case in cases or CASES:
        worst: Optional[GradCheckResult] = None
        for k in range(instances):
            if case == "model":
                res = _model_case(dtype, seed + k, max_coords)
            else:
                inputs, fn = _case_inputs(case, np.random.default_rng([seed, k]))
                res = check_gradients(fn, inputs, dtype, case, seed=seed + k)
            if worst is None or res.max_rel_error > worst.max_rel_error:
                worst = res
        results.append(worst)
        logger.info(f"grad-check {case}: max rel error {worst.max_rel_error:.3e}")
    grad_error_gauge.set(max((r.max_rel_error for r in results), default=0.0))
    return results


def check_grad_tolerance(results: Sequence[GradCheckResult], dtype: str) -> float:
    """Worst error across results; VerificationError when above the dtype tolerance"""
    worst = max((r.max_rel_error for r in results), default=0.0)
    tolerance = Config.grad_tolerance(dtype)
    if worst > tolerance:
        failing = [r.case for r in results if r.max_rel_error > tolerance]
        verification_failures.inc()
        logger.error(f"Gradient check failed for {failing}: {worst:.3e} > {tolerance:.0e}")
        raise VerificationError(f"Relative gradient error {worst:.3e} exceeds {tolerance:.0e} ({', '.join(failing)})",
                                worst, tolerance)
    return worst
