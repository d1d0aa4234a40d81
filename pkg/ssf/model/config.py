from dataclasses import asdict, dataclass, replace
from typing import Any, Dict

from core.errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a ViT-style backbone"""

    image_side: int = 16
    patch_side: int = 4
    d: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    channels: int = 3
    seed: int = 0
    full_width_scale: bool = False

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side * self.patch_side

    @property
    def attention_scale(self) -> float:
        return (self.d if self.full_width_scale else self.head_dim) ** -0.5

    def validate(self) -> "ModelConfig":
        for name in ("image_side", "patch_side", "d", "depth", "heads", "num_classes", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_side % self.patch_side:
            raise ConfigError(f"image_side {self.image_side} is not divisible by patch_side {self.patch_side}")
        if self.d % self.heads:
            raise ConfigError(f"d {self.d} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or abs(self.mlp_ratio * self.d - self.mlp_hidden) > 1e-9:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} does not give an integer hidden width for d {self.d}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


PRESETS: Dict[str, ModelConfig] = {
    "toy": ModelConfig(image_side=16, patch_side=4, d=32, depth=2, heads=4, num_classes=4),
    "small": ModelConfig(image_side=32, patch_side=4, d=64, depth=4, heads=4, num_classes=10),
    "vits16": ModelConfig(image_side=224, patch_side=16, d=384, depth=12, heads=6, num_classes=1000),
    "vitb16": ModelConfig(image_side=224, patch_side=16, d=768, depth=12, heads=12, num_classes=1000),
    "vitl16": ModelConfig(image_side=224, patch_side=16, d=1024, depth=24, heads=16, num_classes=1000),
}


def preset(name: str, **overrides: Any) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown model preset '{name}', expected one of {sorted(PRESETS)}")
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(PRESETS[name], **overrides).validate()
