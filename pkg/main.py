import argparse
import logging
import os
import sys
from datetime import datetime
from typing import List, Optional

# Core imports
from core.config import Config
from core.errors import SsfError, VerificationError
from core.metrics import dump_metrics, start_metrics_server

# Library components
from processors import TASKS
from ssf.adapters.baselines import METHODS
from ssf.adapters.ssf_ada import INIT_SCHEMES, VARIANTS
from ssf.model.config import PRESETS
from ssf.services.gradcheck import CASES
from ssf.tensor import DTYPES

# Handlers
from ssf.handlers.commands import COMMANDS

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting, so usage errors map to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SsfError(f"{self.prog}: {message}")


def setup_logging() -> None:
    """Log to stderr; stdout carries tables and JSON"""
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL, logging.INFO),
        format=Config.LOG_FORMAT,
        stream=sys.stderr,
    )
    if Config.LOG_TO_FILE:
        os.makedirs(Config.LOGS_DIR, exist_ok=True)
        file_handler = logging.FileHandler(f"{Config.LOGS_DIR}/ssf_{datetime.now().strftime('%Y-%m-%d')}.log")
        file_handler.setFormatter(logging.Formatter(Config.LOG_FORMAT))
        logging.getLogger().addHandler(file_handler)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="toy", choices=sorted(PRESETS), help="model preset")
    p.add_argument("--classes", type=int, help="override the head width")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=sorted(DTYPES))
    p.add_argument("--eq1-literal", dest="full_width_scale", action="store_true", help="scale attention by d^-1/2 instead of d_head^-1/2")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--metrics-port", type=int, default=Config.METRICS_PORT)
    p.add_argument("--metrics-file", help="write the metrics registry here when done")


def _method_flags(p: argparse.ArgumentParser, allow_all: bool = False) -> None:
    choices = list(METHODS) + (["all"] if allow_all else [])
    p.add_argument("--method", choices=choices)
    p.add_argument("--ssf-sites", help="all | first:K | without:mlp,attn,embed,norm")
    p.add_argument("--ssf-init", choices=INIT_SCHEMES)
    p.add_argument("--ssf-init-std", type=float)
    p.add_argument("--ssf-variant", choices=VARIANTS)
    p.add_argument("--adapter-dim", type=int)
    p.add_argument("--prompts", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="ssf", description="Scale-and-shift fine-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.25)

    p = sub.add_parser("pretrain", help="train a backbone on an upstream dataset")
    _common(p)
    _train_flags(p)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with one method")
    _common(p)
    _method_flags(p)
    _train_flags(p)
    p.add_argument("--in", dest="input", required=True)

    p = sub.add_parser("fold", help="fold SSF factors into an inference checkpoint")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verify", type=int, default=0, metavar="N_SAMPLES")

    p = sub.add_parser("verify-fold", help="compare hooked and folded logits")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--folded")
    p.add_argument("--samples", type=int, default=50)

    p = sub.add_parser("budget", help="parameter and FLOP budgets")
    _common(p)
    _method_flags(p, allow_all=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--cases", help=f"comma-separated subset of {','.join(CASES)}")
    p.add_argument("--instances", type=int, default=3)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; 0 on success, 1 on errors, 2 when a numerical check fails"""
    setup_logging()
    if not Config.validate_config():
        return 1

    try:
        args = build_parser().parse_args(argv)
    except SsfError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help
        return 0 if not e.code else 1

    try:
        start_metrics_server(args.metrics_port)
        result = COMMANDS[args.command](args)
        print(result.to_json() if args.json else result.text)
        exit_code = 0
        if result.failure is not None:
            logger.error(f"{args.command}: {result.failure}")
            exit_code = 2
    except VerificationError as e:
        logger.error(f"{args.command}: {e}")
        exit_code = 2
    except SsfError as e:
        logger.error(f"{args.command} failed: {e}")
        exit_code = 1
    finally:
        if getattr(args, "metrics_file", None):
            dump_metrics(args.metrics_file)

    return exit_code


if __name__ == "__main__":
    sys.exit(main())
