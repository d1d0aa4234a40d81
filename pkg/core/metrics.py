import json
import os
import logging
from typing import Any, Dict, List

from prometheus_client import Gauge, Counter, Histogram, REGISTRY, start_http_server, write_to_textfile

logger = logging.getLogger(__name__)

# Counters
train_steps = Counter('ssf_train_steps_total', 'Total optimizer steps taken')
folds_total = Counter('ssf_folds_total', 'Total checkpoints folded')
verification_failures = Counter('ssf_verification_failures_total', 'Numerical checks above tolerance')

# Gauges
train_loss_gauge = Gauge('ssf_train_loss', 'Mean training loss of the last epoch')
val_accuracy_gauge = Gauge('ssf_val_accuracy', 'Validation top-1 accuracy of the last epoch')
learning_rate_gauge = Gauge('ssf_learning_rate', 'Current learning rate')
trainable_params_gauge = Gauge('ssf_trainable_params', 'Number of trainable parameters in the active run')
fold_deviation_gauge = Gauge('ssf_fold_max_deviation', 'Max absolute logit deviation folded vs hooked')
grad_error_gauge = Gauge('ssf_grad_check_max_rel_error', 'Max relative gradient error of the last check')

# Histograms
step_seconds = Histogram('ssf_step_seconds', 'Time spent in one training step')


def start_metrics_server(port: int) -> None:
    """Expose the registry over HTTP for long runs"""
    if port > 0:
        start_http_server(port)
        logger.info(f"Metrics server listening on :{port}")


def dump_metrics(path: str) -> None:
    """Write the registry in the Prometheus text format"""
    write_to_textfile(path, REGISTRY)
    logger.info(f"Metrics written to: {path}")


def save_run_record(record: Dict[str, Any], path_prefix: str) -> None:
    """Save per-epoch JSON lines and a final summary next to a checkpoint"""
    directory = os.path.dirname(path_prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(f"{path_prefix}.runs.jsonl", 'w', encoding='utf-8') as f:
            for epoch in record.get("epochs", []):
                f.write(json.dumps(epoch, sort_keys=True) + "\n")
        summary = {k: v for k, v in record.items() if k != "epochs"}
        with open(f"{path_prefix}.summary.json", 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    except OSError as e:
        logger.error(f"Failed to save run record: {e}")
        raise


def load_run_record(path_prefix: str) -> Dict[str, Any]:
    """Load a run record written by save_run_record"""
    epochs: List[Dict[str, Any]] = []
    with open(f"{path_prefix}.runs.jsonl", 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                epochs.append(json.loads(line))
    with open(f"{path_prefix}.summary.json", 'r', encoding='utf-8') as f:
        record = json.load(f)
    record["epochs"] = epochs
    return record
