import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.config import Config
from core.errors import ConfigError, FrozenWeightsMutatedError, TrainingDivergedError
from core.metrics import (
    learning_rate_gauge, step_seconds, train_loss_gauge, train_steps,
    trainable_params_gauge, val_accuracy_gauge
)
from processors import Dataset, Splits
from ssf.adapters.baselines import HEAD, MethodConfig, MethodState, prepare_method, restore_method
from ssf.checkpoint import Checkpoint
from ssf.model.config import ModelConfig
from ssf.model.graph import LayerGraph
from ssf.model.vit import build_model, forward, load_graph, trunc_normal
from ssf.tensor import DTYPES, Tape, Tensor, dtype_tag, ops
from .optim import AdamW, lr_at

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    warmup_epochs: int = 1
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 32
    seed: int = 0
    dtype: str = "f32"
    max_steps: Optional[int] = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must satisfy 0 <= warmup < epochs, "
                              f"got {self.warmup_epochs} / {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"need base_lr > 0 and weight_decay >= 0, got {self.base_lr} / {self.weight_decay}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"Unknown dtype '{self.dtype}', expected one of {sorted(DTYPES)}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        return self

    def with_method(self, method: MethodConfig) -> "TrainConfig":
        """Apply the per-method overrides carried by a MethodConfig"""
        overrides = {"base_lr": method.lr, "weight_decay": method.weight_decay,
                     "epochs": method.epochs, "warmup_epochs": method.warmup_epochs}
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class RunRecord:
    method: str
    train_config: Dict[str, Any]
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    trainable_params: int = 0
    frozen_params: int = 0
    trainable_digest_before: str = ""
    trainable_digest_after: str = ""
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""
    steps: int = 0
    wall_clock: float = 0.0

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1]["val_acc"] if self.epochs else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["final_val_acc"] = self.final_val_acc
        return data


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    loss: float
    correct: int
    total: int


def predict(params: Checkpoint, graph: LayerGraph, images: np.ndarray,
            state: Optional[MethodState] = None, batch_size: int = 64) -> np.ndarray:
    """Logits for ``images``, evaluated in batches without a tape"""
    hooks = state.hooks if state else None
    prompts = state.prompts if state else None
    chunks = [forward(params, graph, images[i:i + batch_size], hooks, prompts).data
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, graph.config.num_classes))


def evaluate(params: Checkpoint, graph: LayerGraph, dataset: Dataset,
             state: Optional[MethodState] = None, batch_size: int = 64) -> EvalResult:
    """Top-1 accuracy and mean cross-entropy"""
    if len(dataset) == 0:
        return EvalResult(float("nan"), float("nan"), 0, 0)
    logits = predict(params, graph, dataset.images, state, batch_size).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(dataset)), dataset.labels].mean())
    correct = int((logits.argmax(axis=1) == dataset.labels).sum())
    return EvalResult(correct / len(dataset), loss, correct, len(dataset))


def _check_compatible(graph: LayerGraph, dataset: Dataset) -> None:
    cfg = graph.config
    expected = (cfg.channels, cfg.image_side, cfg.image_side)
    if tuple(dataset.images.shape[1:]) != expected:
        raise ConfigError(f"Dataset images {list(dataset.images.shape[1:])} do not match model input {list(expected)}")
    if dataset.num_classes != cfg.num_classes:
        raise ConfigError(f"Dataset has {dataset.num_classes} classes but the head has {cfg.num_classes}")


def _run(params: Checkpoint, graph: LayerGraph, state: MethodState, splits: Splits,
         cfg: TrainConfig, record: RunRecord) -> None:
    train = splits.train
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warmup = min(cfg.warmup_epochs * steps_per_epoch, max(total - 1, 0))
    optimizer = AdamW.for_trainable(params, cfg.weight_decay)

    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        order = rng.permutation(len(train))
        losses = []
        lr = 0.0
        for start in range(0, len(train), cfg.batch_size):
            if step >= total:
                break
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(step, total, warmup, cfg.base_lr)
            with step_seconds.time():
                with Tape() as tape:
                    logits = forward(params, graph, train.images[idx], state.hooks, state.prompts)
                    loss = ops.cross_entropy(logits, train.labels[idx])
                    value = loss.item()
                    if not np.isfinite(value):
                        dump = {"seed": cfg.seed, "step": step, "epoch": epoch, "lr": lr,
                                "train_config": cfg.to_dict(), "method": state.method.to_dict()}
                        logger.error(f"Training diverged at step {step} (loss={value}): {dump}")
                        raise TrainingDivergedError(f"Loss became {value} at step {step}", dump)
                    tape.backward(loss)
                optimizer.step(lr)
                optimizer.zero_grad()
            losses.append(value)
            step += 1
            train_steps.inc()
            learning_rate_gauge.set(lr)

        result = evaluate(params, graph, splits.val, state, cfg.batch_size)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        record.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_acc": result.accuracy,
                              "val_loss": result.loss, "lr": lr, "steps": step})
        train_loss_gauge.set(train_loss)
        val_accuracy_gauge.set(result.accuracy)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss={train_loss:.4f} val_acc={result.accuracy:.4f} lr={lr:.2e}")
    record.steps = step


def run_pretrain(model_cfg: ModelConfig, splits: Splits, train_cfg: TrainConfig) -> Tuple[Checkpoint, RunRecord]:
    """Train every backbone tensor from a seeded initialization"""
    train_cfg.validate()
    params, graph = build_model(model_cfg, train_cfg.dtype)
    _check_compatible(graph, splits.train)
    state = prepare_method(params, graph, MethodConfig(method="full"), seed=train_cfg.seed)
    record = RunRecord(method="pretrain", train_config=train_cfg.to_dict(),
                       trainable_params=params.num_params(state.trainable))
    trainable_params_gauge.set(record.trainable_params)

    started = time.perf_counter()
    _run(params, graph, state, splits, train_cfg, record)
    record.wall_clock = time.perf_counter() - started
    record.trainable_digest_after = params.digest()
    logger.info(f"Pretraining finished: {record.steps} steps, val_acc={record.final_val_acc:.4f}")
    return params, record


def pretrain(model_cfg: ModelConfig, splits: Splits, train_cfg: TrainConfig) -> Checkpoint:
    return run_pretrain(model_cfg, splits, train_cfg)[0]


def reset_head(params: Checkpoint, num_classes: int, seed: int) -> None:
    """Replace the classifier with a fresh one of ``num_classes`` outputs"""
    weight = params["head.weight"]
    rng = np.random.default_rng(seed)
    params.add("head.weight", Tensor(trunc_normal(rng, (num_classes, weight.shape[1]),
                                                  std=Config.INIT_STD, dtype=weight.dtype)))
    params.add("head.bias", Tensor(np.zeros(num_classes, dtype=weight.dtype)))
    params.metadata["model_config"] = dict(params.metadata["model_config"], num_classes=num_classes)
    logger.info(f"Classifier head reset to {num_classes} classes")


def finetune(ckpt: Checkpoint, method_cfg: MethodConfig, splits: Splits,
             train_cfg: TrainConfig) -> Tuple[Checkpoint, RunRecord]:
    """Fine-tune a copy of ``ckpt`` with one method; ``ckpt`` itself is never modified"""
    train_cfg = train_cfg.with_method(method_cfg).validate()
    params = ckpt.copy()
    if dtype_tag(params["head.weight"].dtype) != train_cfg.dtype:
        params = params.astype(train_cfg.dtype)
    if any(n.startswith(("ssf.", "adapter.", "prompts.")) for n in params.names()):
        raise ConfigError("finetune expects a backbone checkpoint; fold or strip method tensors first")
    if params["head.weight"].shape[0] != splits.num_classes:
        reset_head(params, splits.num_classes, train_cfg.seed)

    graph = load_graph(params)
    _check_compatible(graph, splits.train)
    state = prepare_method(params, graph, method_cfg, seed=train_cfg.seed)
    trainable = state.trainable
    if method_cfg.method not in ("linear", "ssf") and set(trainable) <= set(HEAD):
        raise ConfigError(f"Method {method_cfg.method} has nothing to train beyond the head")

    frozen = params.frozen_names()
    record = RunRecord(method=method_cfg.method, train_config=train_cfg.to_dict(),
                       trainable_params=params.num_params(trainable), frozen_params=params.num_params(frozen),
                       trainable_digest_before=params.digest(trainable), frozen_digest_before=params.digest(frozen))
    trainable_params_gauge.set(record.trainable_params)
    frozen_before = params.hashes(frozen)

    started = time.perf_counter()
    _run(params, graph, state, splits, train_cfg, record)
    record.wall_clock = time.perf_counter() - started

    changed = [n for n, h in params.hashes(frozen).items() if h != frozen_before[n]]
    if changed:
        logger.error(f"Frozen tensors changed during {method_cfg.method} fine-tuning: {changed}")
        raise FrozenWeightsMutatedError(f"Frozen tensors changed: {', '.join(changed)}")
    record.frozen_digest_after = params.digest(frozen)
    record.trainable_digest_after = params.digest(trainable)
    logger.info(f"Fine-tuning ({method_cfg.method}) finished: {record.steps} steps, "
                f"{record.trainable_params} trainable params, val_acc={record.final_val_acc:.4f}")
    return params, record


def evaluate_checkpoint(params: Checkpoint, dataset: Dataset, batch_size: int = 64) -> EvalResult:
    """Evaluate any checkpoint, rebuilding method hooks and prompts from its metadata"""
    graph = load_graph(params)
    _check_compatible(graph, dataset)
    working = params.copy()
    state = restore_method(working, graph)
    return evaluate(working, graph, dataset, state, batch_size)
