"""Scale-and-shift units: ``y = gamma * x + beta`` on the output of a backbone site.

Factors a variant does not train stay in the checkpoint pinned at 1 / 0 and frozen.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from core.config import Config
from core.errors import ConfigError, ShapeError
from ssf.checkpoint import Checkpoint
from ssf.model.graph import BLOCK_KINDS, NORM_KINDS, FoldTarget, LayerGraph, Site
from ssf.tensor import Tensor, ops, resolve_dtype

logger = logging.getLogger(__name__)

SITE_POLICIES = ("all", "first_k_layers", "without")
INIT_SCHEMES = ("normal", "trunc_normal", "uniform", "constant", "random_zero_mean")
VARIANTS = ("full", "no_scale", "no_shift", "norm_only", "scalar_scale")
LOCATION_GROUPS: Dict[str, Tuple[str, ...]] = {
    "mlp": ("fc1", "fc2"),
    "attn": ("qkv", "attn_proj"),
    "embed": ("embed",),
    "norm": NORM_KINDS,
}


@dataclass(frozen=True)
class SsfConfig:
    """Where SSF units go, how they start and which factors train"""

    site_policy: str = "all"
    k: int = 0
    exclude: Tuple[str, ...] = ()
    init: str = "normal"
    init_std: float = field(default_factory=lambda: Config.SSF_INIT_STD)
    variant: str = "full"

    def validate(self) -> "SsfConfig":
        if self.site_policy not in SITE_POLICIES:
            raise ConfigError(f"Unknown SSF site policy '{self.site_policy}', expected one of {SITE_POLICIES}")
        if self.site_policy == "first_k_layers" and self.k < 0:
            raise ConfigError(f"first_k_layers needs k >= 0, got {self.k}")
        if self.site_policy == "without":
            unknown = set(self.exclude) - set(LOCATION_GROUPS)
            if unknown or not self.exclude:
                raise ConfigError(f"without() needs kinds from {sorted(LOCATION_GROUPS)}, got {list(self.exclude)}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"Unknown SSF init scheme '{self.init}', expected one of {INIT_SCHEMES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown SSF variant '{self.variant}', expected one of {VARIANTS}")
        if self.init_std <= 0:
            raise ConfigError(f"SSF init std must be positive, got {self.init_std}")
        return self

    @property
    def trains_scale(self) -> bool:
        return self.variant != "no_scale"

    @property
    def trains_shift(self) -> bool:
        return self.variant != "no_shift"

    def gamma_len(self, out_dim: int) -> int:
        return 1 if self.variant == "scalar_scale" else out_dim

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["exclude"] = list(self.exclude)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SsfConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "exclude" in known:
            known["exclude"] = tuple(known["exclude"])
        return cls(**known).validate()

    @staticmethod
    def parse_sites(text: str) -> Dict:
        """``all`` | ``first:K`` | ``first_k_layers:K`` | ``without:mlp,norm``"""
        text = (text or "all").strip()
        if text == "all":
            return {"site_policy": "all"}
        name, _, arg = text.partition(":")
        if name in ("first", "first_k_layers"):
            try:
                return {"site_policy": "first_k_layers", "k": int(arg)}
            except ValueError:
                raise ConfigError(f"first_k_layers needs an integer k, got '{arg}'")
        if name == "without":
            return {"site_policy": "without", "exclude": tuple(p for p in arg.split(",") if p)}
        raise ConfigError(f"Cannot parse SSF site policy '{text}'")


@dataclass
class SsfSite:
    site_id: str
    gamma: Tensor
    beta: Tensor
    target: FoldTarget
    out_dim: int

    def __post_init__(self):
        if self.beta.shape != (self.out_dim,) or self.gamma.shape not in ((self.out_dim,), (1,)):
            raise ShapeError(f"{self.site_id}: gamma {list(self.gamma.shape)} / beta {list(self.beta.shape)} "
                             f"do not match out_dim {self.out_dim}")


@dataclass
class SsfAttachment:
    hooks: Dict[str, object]
    trainable: List[str]
    sites: List[SsfSite]


def gamma_name(site_id: str) -> str:
    return f"ssf.{site_id}.gamma"


def beta_name(site_id: str) -> str:
    return f"ssf.{site_id}.beta"


def ssf_ada(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """y = gamma ⊙ x + beta over the last axis"""
    return ops.scale_shift_channels(x, gamma, beta)


def select_sites(graph: LayerGraph, cfg: SsfConfig) -> List[Site]:
    cfg.validate()
    candidates = [s for s in graph if s.kind != "head" and s.target is not None]
    if cfg.site_policy == "first_k_layers":
        candidates = [s for s in candidates
                      if (s.kind in BLOCK_KINDS and s.layer_index < cfg.k)
                      or (s.kind not in BLOCK_KINDS and cfg.k >= 1)]
    elif cfg.site_policy == "without":
        dropped = {kind for group in cfg.exclude for kind in LOCATION_GROUPS[group]}
        candidates = [s for s in candidates if s.kind not in dropped]
    if cfg.variant == "norm_only":
        candidates = [s for s in candidates if s.kind in NORM_KINDS]
    return candidates


def ssf_param_count(graph: LayerGraph, cfg: SsfConfig) -> int:
    """Trainable SSF factors for (graph, cfg), without the head"""
    total = 0
    for site in select_sites(graph, cfg):
        if cfg.trains_scale:
            total += cfg.gamma_len(site.out_dim)
        if cfg.trains_shift:
            total += site.out_dim
    return total


def init_ssf(sites: Sequence[SsfSite], scheme: str, seed: int, std: Optional[float] = None,
             scale_trainable: bool = True, shift_trainable: bool = True) -> None:
    """Fill gamma/beta in place; pinned factors keep exactly 1 / 0"""
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"Unknown SSF init scheme '{scheme}', expected one of {INIT_SCHEMES}")
    std = Config.SSF_INIT_STD if std is None else std
    half_width = std * np.sqrt(3.0)
    rng = np.random.default_rng(seed)

    def draw(shape, mean: float) -> np.ndarray:
        if scheme == "normal":
            return rng.normal(mean, std, size=shape)
        if scheme == "trunc_normal":
            return truncnorm.rvs(-2.0, 2.0, loc=mean, scale=std, size=shape, random_state=rng)
        if scheme == "uniform":
            return rng.uniform(mean - half_width, mean + half_width, size=shape)
        if scheme == "random_zero_mean":
            return rng.normal(0.0, std, size=shape)
        return np.full(shape, mean)

    for site in sites:
        dtype = site.gamma.dtype
        gamma = draw(site.gamma.shape, 1.0) if scale_trainable else np.ones(site.gamma.shape)
        beta = draw(site.beta.shape, 0.0) if shift_trainable else np.zeros(site.beta.shape)
        site.gamma.data[...] = np.asarray(gamma, dtype=dtype).reshape(site.gamma.shape)
        site.beta.data[...] = np.asarray(beta, dtype=dtype).reshape(site.beta.shape)


def attach(graph: LayerGraph, cfg: SsfConfig, params: Checkpoint, seed: int = 0) -> SsfAttachment:
    """Create (or reuse) SSF factors in ``params`` and return hooks plus the trainable set.

    Factors already present in ``params`` (a resumed or trained checkpoint)
    are reused as they are; missing ones are created and initialized.
    """
    cfg.validate()
    selected = select_sites(graph, cfg)
    dtype = resolve_dtype(params["head.weight"].dtype) if "head.weight" in params else resolve_dtype("f32")

    sites: List[SsfSite] = []
    fresh: List[SsfSite] = []
    for site in selected:
        g_name, b_name = gamma_name(site.site_id), beta_name(site.site_id)
        reuse = g_name in params and b_name in params
        if not reuse:
            params.add(g_name, Tensor(np.ones(cfg.gamma_len(site.out_dim), dtype=dtype)), frozen=not cfg.trains_scale)
            params.add(b_name, Tensor(np.zeros(site.out_dim, dtype=dtype)), frozen=not cfg.trains_shift)
        ssf_site = SsfSite(site.site_id, params[g_name], params[b_name], site.target, site.out_dim)
        sites.append(ssf_site)
        if not reuse:
            fresh.append(ssf_site)

    init_ssf(fresh, cfg.init, seed, cfg.init_std, cfg.trains_scale, cfg.trains_shift)

    trainable: List[str] = []
    for s in sites:
        if cfg.trains_scale:
            trainable.append(gamma_name(s.site_id))
        if cfg.trains_shift:
            trainable.append(beta_name(s.site_id))
    trainable.extend(["head.weight", "head.bias"])

    if not sites:
        logger.warning("SSF site policy selects no sites; training reduces to linear probing")
    else:
        logger.info(f"Attached SSF to {len(sites)} sites ({cfg.variant}, init={cfg.init}), "
                    f"{params.num_params(trainable[:-2])} factors")

    hooks = {s.site_id: _make_hook(s) for s in sites}
    return SsfAttachment(hooks=hooks, trainable=trainable, sites=sites)


def _make_hook(site: SsfSite):
    def hook(x: Tensor) -> Tensor:
        return ssf_ada(x, site.gamma, site.beta)
    return hook
