from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from core.errors import ConfigError

from ssf.model.config import ModelConfig
from ssf.model.graph import build_graph
from ssf.model.vit import count_backbone_params, is_bias, is_head, parameter_shapes
from .baselines import METHODS, MethodConfig
from .ssf_ada import ssf_param_count


@dataclass(frozen=True)
class BudgetReport:
    method: str
    trainable_params: int
    extra_train_params: int
    extra_infer_params: int
    extra_infer_flops: int
    extra_train_flops: int
    backbone_params: int
    head_params: int
    backbone_flops: int = 0
    ssf_m: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def head_params(model_cfg: ModelConfig) -> int:
    return model_cfg.d * model_cfg.num_classes + model_cfg.num_classes


def bias_params(model_cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for n, s in parameter_shapes(model_cfg).items() if is_bias(n) and not is_head(n)))


def backbone_flops(model_cfg: ModelConfig) -> int:
    """Multiply-accumulates of one forward pass, in the same convention as the extra FLOPs"""
    t, d, hidden = model_cfg.tokens, model_cfg.d, model_cfg.mlp_hidden
    embed = model_cfg.num_patches * model_cfg.patch_dim * d
    per_layer = 4 * t * d * d + 2 * t * t * d + 2 * t * d * hidden
    return int(embed + model_cfg.depth * per_layer + d * model_cfg.num_classes)


def budget(method_cfg: MethodConfig, model_cfg: ModelConfig) -> BudgetReport:
    """Extra FLOPs: adapter 2N²Ldd', VPT-shallow 2n(2N²+n)d, VPT-deep 2n(2N²+n)Ld, SSF mN²Ld (0 once folded)"""
    model_cfg.validate()
    L, d, n2 = model_cfg.depth, model_cfg.d, model_cfg.num_patches
    head = head_params(model_cfg)
    backbone = count_backbone_params(model_cfg)
    kind = method_cfg.method
    extra = infer_params = infer_flops = train_flops = 0
    trainable = head
    m = 0.0

    if kind == "full":
        trainable = backbone + head
    elif kind == "linear":
        pass
    elif kind == "bias":
        trainable = bias_params(model_cfg) + head
    elif kind == "adapter":
        dp = method_cfg.adapter_dim
        extra = 2 * L * d * dp + (L * (dp + d) if method_cfg.adapter_bias else 0)
        infer_params = extra
        infer_flops = train_flops = 2 * n2 * L * d * dp
        trainable = extra + head
    elif kind in ("vpt_shallow", "vpt_deep"):
        n = max(method_cfg.prompts, 0)
        layers = L if kind == "vpt_deep" else 1
        extra = infer_params = n * layers * d
        infer_flops = train_flops = 2 * n * (2 * n2 + n) * layers * d
        trainable = extra + head
    elif kind == "ssf":
        extra = ssf_param_count(build_graph(model_cfg), method_cfg.ssf)
        train_flops = n2 * extra
        m = extra / float(L * d)
        trainable = extra + head
    else:
        raise ConfigError(f"Unknown method '{kind}', expected one of {METHODS}")

    return BudgetReport(method=kind, trainable_params=int(trainable), extra_train_params=int(extra),
                        extra_infer_params=int(infer_params), extra_infer_flops=int(infer_flops),
                        extra_train_flops=int(train_flops), backbone_params=int(backbone),
                        head_params=int(head), backbone_flops=backbone_flops(model_cfg),
                        ssf_m=round(m, 4))


COLUMNS = (
    ("method", "method"),
    ("trainable_params", "trainable"),
    ("trainable_params", "trainable (M)"),
    ("extra_train_params", "extra train"),
    ("extra_infer_params", "extra infer"),
    ("extra_train_flops", "extra train FLOPs"),
    ("extra_infer_flops", "extra infer FLOPs"),
)


def format_budget_table(reports: List[BudgetReport]) -> str:
    """Aligned plain-text table, one row per report"""
    rows = [[title for _, title in COLUMNS]]
    for report in reports:
        data = report.to_dict()
        row = []
        for key, title in COLUMNS:
            value = data[key]
            if title.endswith("(M)"):
                row.append(f"{value / 1e6:.2f}")
            elif isinstance(value, int):
                row.append(f"{value:,}")
            else:
                row.append(str(value))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
    lines = []
    for idx, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
