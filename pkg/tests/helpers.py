from typing import Optional

import numpy as np

from ssf.adapters.baselines import MethodConfig
from ssf.adapters.ssf_ada import SsfConfig
from ssf.model.config import ModelConfig


def random_images(cfg: ModelConfig, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, cfg.channels, cfg.image_side, cfg.image_side))


def ssf_method(variant: str = "full", init: str = "normal", sites: Optional[str] = None,
               init_std: float = 0.02) -> MethodConfig:
    fields = SsfConfig.parse_sites(sites) if sites else {}
    return MethodConfig(method="ssf", ssf=SsfConfig(variant=variant, init=init, init_std=init_std, **fields))


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar fn over every coordinate of x (float64)"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn(x)
        flat[i] = saved - h
        minus = fn(x)
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad
