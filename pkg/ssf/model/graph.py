from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

from core.errors import GraphError
from .config import ModelConfig

SITE_KINDS = ("embed", "ln1", "qkv", "attn_proj", "ln2", "fc1", "fc2", "final_ln", "head")
BLOCK_KINDS = ("ln1", "qkv", "attn_proj", "ln2", "fc1", "fc2")
NORM_KINDS = ("ln1", "ln2", "final_ln")


@dataclass(frozen=True)
class FoldTarget:
    """Parameters of the op that produces a site's output"""

    kind: str  # linear | layernorm_affine | embedding
    weight_name: str
    bias_name: str
    extra_names: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Site:
    site_id: str
    kind: str
    layer_index: int  # -1 for global sites
    out_dim: int
    target: Optional[FoldTarget] = None


@dataclass
class LayerGraph:
    """Ordered attachment sites of a backbone, in forward order"""

    sites: List[Site]
    config: Optional[ModelConfig] = None
    _index: Dict[str, Site] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for site in self.sites:
            if site.site_id in self._index:
                raise GraphError(f"Duplicate site id: {site.site_id}")
            self._index[site.site_id] = site

    def __iter__(self) -> Iterator[Site]:
        return iter(self.sites)

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site_id: str) -> bool:
        return site_id in self._index

    def site(self, site_id: str) -> Site:
        if site_id not in self._index:
            raise GraphError(f"Unknown site id: {site_id}")
        return self._index[site_id]

    def of_kind(self, *kinds: str) -> List[Site]:
        return [s for s in self.sites if s.kind in kinds]

    def check_ids(self, site_ids) -> None:
        unknown = sorted(set(site_ids) - set(self._index))
        if unknown:
            raise GraphError(f"Unknown site ids: {', '.join(unknown)}")


def block_site_id(layer: int, kind: str) -> str:
    return f"blocks.{layer}.{kind}"


def build_graph(cfg: ModelConfig) -> LayerGraph:
    d = cfg.d
    sites = [Site("embed", "embed", -1, d,
                  FoldTarget("embedding", "patch_embed.weight", "patch_embed.bias", ("cls_token", "pos_embed")))]
    for i in range(cfg.depth):
        prefix = f"blocks.{i}"
        sites.extend([
            Site(block_site_id(i, "ln1"), "ln1", i, d,
                 FoldTarget("layernorm_affine", f"{prefix}.ln1.weight", f"{prefix}.ln1.bias")),
            Site(block_site_id(i, "qkv"), "qkv", i, 3 * d,
                 FoldTarget("linear", f"{prefix}.attn.qkv.weight", f"{prefix}.attn.qkv.bias")),
            Site(block_site_id(i, "attn_proj"), "attn_proj", i, d,
                 FoldTarget("linear", f"{prefix}.attn.proj.weight", f"{prefix}.attn.proj.bias")),
            Site(block_site_id(i, "ln2"), "ln2", i, d,
                 FoldTarget("layernorm_affine", f"{prefix}.ln2.weight", f"{prefix}.ln2.bias")),
            Site(block_site_id(i, "fc1"), "fc1", i, cfg.mlp_hidden,
                 FoldTarget("linear", f"{prefix}.mlp.fc1.weight", f"{prefix}.mlp.fc1.bias")),
            Site(block_site_id(i, "fc2"), "fc2", i, d,
                 FoldTarget("linear", f"{prefix}.mlp.fc2.weight", f"{prefix}.mlp.fc2.bias")),
        ])
    sites.append(Site("final_ln", "final_ln", -1, d, FoldTarget("layernorm_affine", "norm.weight", "norm.bias")))
    sites.append(Site("head", "head", -1, cfg.num_classes))
    return LayerGraph(sites, cfg)
