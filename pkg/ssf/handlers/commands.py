import json
import logging
from argparse import Namespace
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from core.config import Config
from core.errors import ConfigError, VerificationError
from core.metrics import save_run_record
from processors import DatasetProcessor, DatasetSpec, TASKS
from ssf.adapters.baselines import METHODS, MethodConfig
from ssf.adapters.budget import budget, format_budget_table
from ssf.adapters.ssf_ada import SsfConfig
from ssf.checkpoint import Checkpoint
from ssf.tensor import dtype_tag
from ssf.model.config import ModelConfig, preset
from ssf.model.vit import load_graph, parameter_shapes
from ssf.services.fold import (
    build_fold_plan, check_fold_tolerance, fold_checkpoint, verify_fold, weight_stats
)
from ssf.services.gradcheck import CASES, check_grad_tolerance, run_grad_checks
from ssf.services.trainer import TrainConfig, evaluate_checkpoint, finetune, run_pretrain

logger = logging.getLogger(__name__)

JSON_SCHEMA_VERSION = 1


@dataclass
class CommandResult:
    """What a command reports: a JSON payload, a text rendering and an optional failed check"""

    command: str
    payload: Dict[str, Any]
    text: str
    failure: Optional[VerificationError] = None

    def to_json(self) -> str:
        body = {"schema_version": JSON_SCHEMA_VERSION, "command": self.command,
                "status": "verification_failed" if self.failure else "ok"}
        body.update(self.payload)
        return json.dumps(body, indent=2, sort_keys=True)


def _lines(pairs: Dict[str, Any]) -> str:
    width = max((len(k) for k in pairs), default=0)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in pairs.items())


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON run configuration (TrainConfig and MethodConfig keys)"""
    if not path:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Failed to read run config {path}: {e}")
        raise ConfigError(f"Cannot read run config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Run config {path} must be a JSON object")
    return data


def _pick(args: Namespace, file_cfg: Dict[str, Any], flag: str, key: str, default: Any) -> Any:
    """Explicit flag, else config file value, else default"""
    value = getattr(args, flag, None)
    if value is not None:
        return value
    return file_cfg.get(key, default)


def model_config(args: Namespace, num_classes: Optional[int] = None) -> ModelConfig:
    classes = getattr(args, "classes", None) or num_classes
    return preset(args.model, num_classes=classes, seed=getattr(args, "seed", None),
                  full_width_scale=True if getattr(args, "full_width_scale", False) else None)


def method_config(args: Namespace, method: Optional[str] = None) -> MethodConfig:
    file_cfg = load_run_config(getattr(args, "config", None))
    ssf_file = file_cfg.get("ssf", {}) if isinstance(file_cfg.get("ssf"), dict) else {}
    ssf_fields: Dict[str, Any] = dict(ssf_file)
    if getattr(args, "ssf_sites", None):
        ssf_fields.update(SsfConfig.parse_sites(args.ssf_sites))
    for flag, key in (("ssf_init", "init"), ("ssf_init_std", "init_std"), ("ssf_variant", "variant")):
        if getattr(args, flag, None) is not None:
            ssf_fields[key] = getattr(args, flag)
    ssf_cfg = SsfConfig.from_dict(ssf_fields)

    return MethodConfig(
        method=method or _pick(args, file_cfg, "method", "method", "ssf"),
        adapter_dim=_pick(args, file_cfg, "adapter_dim", "adapter_dim", 8),
        adapter_bias=bool(file_cfg.get("adapter_bias", False)),
        prompts=_pick(args, file_cfg, "prompts", "prompts", 10),
        ssf=ssf_cfg,
        lr=file_cfg.get("method_lr"),
        weight_decay=file_cfg.get("method_weight_decay"),
        epochs=file_cfg.get("method_epochs"),
        warmup_epochs=file_cfg.get("method_warmup_epochs"),
    )


def train_config(args: Namespace) -> TrainConfig:
    file_cfg = load_run_config(getattr(args, "config", None))
    defaults = TrainConfig()
    return TrainConfig(
        epochs=_pick(args, file_cfg, "epochs", "epochs", defaults.epochs),
        warmup_epochs=_pick(args, file_cfg, "warmup_epochs", "warmup_epochs", defaults.warmup_epochs),
        base_lr=_pick(args, file_cfg, "lr", "base_lr", defaults.base_lr),
        weight_decay=_pick(args, file_cfg, "weight_decay", "weight_decay", defaults.weight_decay),
        batch_size=_pick(args, file_cfg, "batch_size", "batch_size", defaults.batch_size),
        seed=_pick(args, file_cfg, "seed", "seed", defaults.seed),
        dtype=_pick(args, file_cfg, "dtype", "dtype", defaults.dtype),
        max_steps=_pick(args, file_cfg, "max_steps", "max_steps", defaults.max_steps),
    ).validate()


def gen_data(args: Namespace) -> CommandResult:
    """Generate a synthetic task and write it as a dataset directory"""
    if args.task not in TASKS:
        raise ConfigError(f"Unknown task '{args.task}', expected one of {TASKS}")
    cfg = model_config(args)
    spec = DatasetSpec(task_id=args.task, seed=args.seed or 0, n_train=args.n_train, n_val=args.n_val,
                       image_side=cfg.image_side, channels=cfg.channels, num_classes=cfg.num_classes,
                       noise=args.noise).validate()
    splits = DatasetProcessor.gen_synthetic(spec)
    DatasetProcessor.save(splits, args.out)
    counts = Counter(int(v) for v in splits.train.labels)
    payload = {"task": spec.task_id, "out": args.out, "n_train": len(splits.train), "n_val": len(splits.val),
               "num_classes": spec.num_classes, "train_class_counts": {str(k): counts[k] for k in sorted(counts)}}
    return CommandResult("gen-data", payload, _lines(payload))


def _save_run(params: Checkpoint, record, out: str) -> None:
    params.save(out)
    save_run_record(record.to_dict(), out)


def pretrain(args: Namespace) -> CommandResult:
    """Train a backbone from scratch on an upstream dataset"""
    train_cfg = train_config(args)
    splits = DatasetProcessor.load(args.data)
    cfg = model_config(args, splits.num_classes)
    params, record = run_pretrain(cfg, splits, train_cfg)
    _save_run(params, record, args.out)
    payload = {"out": args.out, "steps": record.steps, "val_acc": record.final_val_acc,
               "params": params.num_params(), "wall_clock": round(record.wall_clock, 3)}
    return CommandResult("pretrain", payload, _lines(payload))


def finetune_cmd(args: Namespace) -> CommandResult:
    """Fine-tune a pretrained checkpoint with one method"""
    train_cfg = train_config(args)
    method = method_config(args)
    splits = DatasetProcessor.load(args.data)
    ckpt = Checkpoint.load(args.input)
    params, record = finetune(ckpt, method, splits, train_cfg)
    _save_run(params, record, args.out)
    payload = {"out": args.out, "method": method.method, "steps": record.steps,
               "trainable_params": record.trainable_params, "frozen_params": record.frozen_params,
               "val_acc": record.final_val_acc, "frozen_digest": record.frozen_digest_after,
               "wall_clock": round(record.wall_clock, 3)}
    return CommandResult("finetune", payload, _lines(payload))


def _verify(ckpt: Checkpoint, folded: Checkpoint, samples: int, seed: int, payload: Dict[str, Any]):
    graph = load_graph(ckpt)
    deviation = verify_fold(ckpt, folded, graph, samples, seed)
    dtype = ckpt["head.weight"].dtype
    payload["max_abs_deviation"] = deviation
    payload["tolerance"] = Config.fold_tolerance(dtype_tag(dtype))
    try:
        check_fold_tolerance(deviation, dtype)
    except VerificationError as e:
        return e
    return None


def fold(args: Namespace) -> CommandResult:
    """Fold SSF factors into the backbone and write an inference checkpoint"""
    ckpt = Checkpoint.load(args.input)
    graph = load_graph(ckpt)
    plan = build_fold_plan(graph, ckpt)
    folded = fold_checkpoint(ckpt, plan)

    payload: Dict[str, Any] = {
        "out": args.out,
        "sites": len(plan),
        "params_before": ckpt.num_params(),
        "params_after": folded.num_params(),
        "extra_infer_params": folded.num_params() - sum(int(np.prod(s)) for s in parameter_shapes(graph.config).values()),
        "plan_hash": folded.metadata["fold"]["plan_hash"],
    }
    if args.json:
        targets: List[str] = []
        for step in plan.steps:
            targets.extend([step.target.weight_name, step.target.bias_name, *step.target.extra_names])
        payload["weight_stats"] = {"before": weight_stats(ckpt, targets), "after": weight_stats(folded, targets)}

    failure = None
    if args.verify:
        failure = _verify(ckpt, folded, args.verify, args.seed or 0, payload)
    if failure is None:
        folded.save(args.out)
    else:
        logger.error(f"Fold verification failed, {args.out} not written")
    payload["written"] = failure is None
    text = _lines({k: v for k, v in payload.items() if k != "weight_stats"})
    return CommandResult("fold", payload, text, failure)


def verify_fold_cmd(args: Namespace) -> CommandResult:
    """Measure hooked-vs-folded logit deviation, folding in memory unless --folded is given"""
    ckpt = Checkpoint.load(args.input)
    if args.folded:
        folded = Checkpoint.load(args.folded)
    else:
        folded = fold_checkpoint(ckpt, build_fold_plan(load_graph(ckpt), ckpt))
    payload: Dict[str, Any] = {"samples": args.samples}
    failure = _verify(ckpt, folded, args.samples, args.seed or 0, payload)
    return CommandResult("verify-fold", payload, _lines(payload), failure)


def budget_cmd(args: Namespace) -> CommandResult:
    """Closed-form trainable / extra parameter and FLOP budgets"""
    cfg = model_config(args)
    methods = METHODS if args.method == "all" else (args.method or "ssf",)
    reports = []
    for name in methods:
        if name not in METHODS:
            raise ConfigError(f"Unknown method '{name}', expected one of {METHODS} or 'all'")
        reports.append(budget(method_config(args, name), cfg))
    payload = {"model": args.model, "num_classes": cfg.num_classes, "reports": [r.to_dict() for r in reports]}
    return CommandResult("budget", payload, format_budget_table(reports))


def eval_cmd(args: Namespace) -> CommandResult:
    """Top-1 accuracy and mean loss of a checkpoint on one split"""
    ckpt = Checkpoint.load(args.input)
    splits = DatasetProcessor.load(args.data)
    dataset = splits.val if args.split == "val" else splits.train
    result = evaluate_checkpoint(ckpt, dataset)
    payload = {"split": args.split, "accuracy": result.accuracy, "loss": result.loss,
               "correct": result.correct, "total": result.total,
               "method": ckpt.metadata.get("method", {}).get("method", "full")}
    return CommandResult("eval", payload, _lines(payload))


def grad_check(args: Namespace) -> CommandResult:
    """Finite-difference check of the analytic gradients"""
    dtype = args.dtype or "f64"
    cases = args.cases.split(",") if args.cases else None
    if cases:
        unknown = sorted(set(cases) - set(CASES))
        if unknown:
            raise ConfigError(f"Unknown grad-check cases {unknown}, expected from {CASES}")
    results = run_grad_checks(seed=args.seed or 0, dtype=dtype, cases=cases, instances=args.instances)
    worst = max(r.max_rel_error for r in results)
    payload = {"dtype": dtype, "max_rel_error": worst, "tolerance": Config.grad_tolerance(dtype),
               "cases": [r.to_dict() for r in results]}
    text = "\n".join(f"{r.case:<14} {r.max_rel_error:.3e}" for r in results) + f"\n{'max':<14} {worst:.3e}"
    failure = None
    try:
        check_grad_tolerance(results, dtype)
    except VerificationError as e:
        failure = e
    return CommandResult("grad-check", payload, text, failure)


COMMANDS: Dict[str, Callable[[Namespace], CommandResult]] = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "finetune": finetune_cmd,
    "fold": fold,
    "budget": budget_cmd,
    "eval": eval_cmd,
    "verify-fold": verify_fold_cmd,
    "grad-check": grad_check,
}
