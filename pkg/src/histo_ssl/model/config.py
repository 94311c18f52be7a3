from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict

from histo_ssl.errors import ConfigError


class MlpActivation(Enum):
    """Feed-forward activation"""

    GELU = "gelu"
    SWIGLU = "swiglu"


class EmbeddingMode(Enum):
    """How a tile embedding is read off the token outputs"""

    CLS_ONLY = "cls_only"
    CLS_MEAN = "cls_mean"
    PATCH_MAX = "patch_max"
    PATCH_MEAN = "patch_mean"


@dataclass
class ModelConfig:
    """Vision transformer architecture"""

    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    mlp_activation: MlpActivation = MlpActivation.GELU
    registers: int = 4
    qk_norm: bool = False
    dual_patchnorm: bool = False
    image_size: int = 64
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if isinstance(self.mlp_activation, str):
            self.mlp_activation = MlpActivation(self.mlp_activation.lower())
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embedding dimension {self.embed_dim} is not divisible by {self.heads} heads"
            )
        if self.registers < 0:
            raise ConfigError(f"registers must be >= 0, got {self.registers}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop path rate must be in [0, 1), got {self.drop_path_rate}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def n_tokens(self) -> int:
        return 1 + self.registers + self.n_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def mlp_hidden(self) -> int:
        hidden = self.mlp_ratio * self.embed_dim
        if self.mlp_activation is MlpActivation.SWIGLU:
            return max(8, int(round(hidden / 8.0)) * 8)
        return int(round(hidden))

    def embedding_dim(self, mode: EmbeddingMode | str) -> int:
        mode = EmbeddingMode(mode)
        return 2 * self.embed_dim if mode is EmbeddingMode.CLS_MEAN else self.embed_dim

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["mlp_activation"] = self.mlp_activation.value
        return values


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "toy": ModelConfig(
        patch_size=8, embed_dim=128, depth=4, heads=4, registers=4, image_size=64
    ),
    # ViT-B/16 backbone of the augmentation and regularizer ablations
    "ablation": ModelConfig(
        patch_size=16,
        embed_dim=768,
        depth=12,
        heads=12,
        mlp_activation=MlpActivation.GELU,
        registers=0,
        image_size=224,
        drop_path_rate=0.4,
    ),
    "virchow2": ModelConfig(
        patch_size=14,
        embed_dim=1280,
        depth=32,
        heads=16,
        mlp_activation=MlpActivation.SWIGLU,
        registers=4,
        image_size=224,
        drop_path_rate=0.4,
    ),
    "virchow2g": ModelConfig(
        patch_size=14,
        embed_dim=1792,
        depth=48,
        heads=28,
        mlp_activation=MlpActivation.SWIGLU,
        registers=8,
        qk_norm=True,
        dual_patchnorm=True,
        image_size=224,
        drop_path_rate=0.4,
    ),
    "virchow2g_mini": ModelConfig(
        patch_size=14,
        embed_dim=384,
        depth=12,
        heads=6,
        mlp_activation=MlpActivation.GELU,
        registers=4,
        image_size=224,
    ),
}


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of backbone parameters (mask token included)."""
    d = cfg.embed_dim
    hidden = cfg.mlp_hidden
    count = cfg.patch_dim * d + d  # patch projection
    if cfg.dual_patchnorm:
        count += 2 * cfg.patch_dim + 2 * d
    count += (1 + cfg.n_patches) * d  # positional embeddings for cls and patches
    count += d  # cls token
    count += cfg.registers * d
    count += d  # mask token

    per_block = 2 * d  # norm1
    per_block += d * 3 * d + 3 * d  # qkv
    if cfg.qk_norm:
        per_block += 4 * cfg.head_dim
    per_block += d * d + d  # attention projection
    per_block += 2 * d  # norm2
    if cfg.mlp_activation is MlpActivation.SWIGLU:
        per_block += 2 * (d * hidden + hidden)
    else:
        per_block += d * hidden + hidden
    per_block += hidden * d + d
    count += cfg.depth * per_block
    count += 2 * d  # final norm
    return count
