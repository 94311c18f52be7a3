"""
Run configuration: flat ``key = value`` files, presets and overrides.

Values are Python literals (numbers, ``True``/``False``, tuples); anything that
does not parse as a literal is kept as a string. Every resolved mapping is
validated against ``presets/schema/run.schema.json``.
"""

import ast
import logging
import math
import pathlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import jsonschema

from histo_ssl import utils
from histo_ssl.augment.ect import EctConfig
from histo_ssl.augment.photometric import PhotometricPolicy
from histo_ssl.augment.views import ViewMethod
from histo_ssl.errors import ConfigError
from histo_ssl.model.config import EmbeddingMode, ModelConfig
from histo_ssl.objective.entropy import RegularizerConfig
from histo_ssl.objective.heads import HeadConfig
from histo_ssl.optim import OptimConfig, lr_scale

logger = logging.getLogger(__name__)

PRESETS_DIR = pathlib.Path(__file__).parent.parent / "presets"
SCHEMA_PATH = PRESETS_DIR / "schema" / "run.schema.json"
BASE_PRESET = "toy"
PRESET_NAMES = ("toy", "ablation", "virchow2", "virchow2g", "virchow2g_mini")
SNAPSHOT_NAME = "resolved_config.cfg"

ConfigValues = Dict[str, Any]


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, source: str = "<config>") -> ConfigValues:
    values: ConfigValues = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: missing key in {raw!r}")
        values[key] = parse_value(value)
    return values


def read_config_file(path: pathlib.Path) -> ConfigValues:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, source=str(path))


def parse_overrides(overrides: Iterable[str]) -> ConfigValues:
    values: ConfigValues = {}
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"invalid override {override!r}, expected key=value")
        key, value = override.split("=", 1)
        values[key.strip()] = parse_value(value)
    return values


def preset_path(name: str) -> pathlib.Path:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name}, available: {list(PRESET_NAMES)}")
    return PRESETS_DIR / f"{name}.cfg"


def _jsonable(values: Mapping[str, Any]) -> ConfigValues:
    """Tuples become lists so the schema's array types apply."""
    return {
        key: list(value) if isinstance(value, tuple) else value
        for key, value in values.items()
    }


def _normalize(values: Mapping[str, Any]) -> ConfigValues:
    """Lists (e.g. from a checkpoint header) become tuples again."""
    return {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in values.items()
    }


def validate_config(values: Mapping[str, Any]) -> None:
    schema = utils.read_json_file(SCHEMA_PATH)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(_jsonable(values)), key=lambda e: list(e.path))
    if errors:
        messages = []
        for error in errors:
            location = ".".join(str(p) for p in error.path) or "config"
            messages.append(f"{location}: {error.message}")
        raise ConfigError("invalid configuration: " + "; ".join(messages))


def resolve_config(
    path: Optional[pathlib.Path] = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
    preset: Optional[str] = None,
) -> ConfigValues:
    """toy defaults <- named preset <- config file <- overrides, validated."""
    file_values = read_config_file(path) if path is not None else {}
    if isinstance(overrides, Mapping):
        override_values = dict(overrides)
    else:
        override_values = parse_overrides(overrides)

    name = override_values.get("preset") or file_values.get("preset") or preset or BASE_PRESET
    values = read_config_file(preset_path(BASE_PRESET))
    if name != BASE_PRESET:
        values.update(read_config_file(preset_path(str(name))))
    values.update(file_values)
    values.update(override_values)
    values["preset"] = name
    values = _normalize(values)
    validate_config(values)
    if values.get("precision") == "FP16":
        logger.warning("FP16 is not supported, running in 32-bit precision")
    return values


def format_config(values: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, list):
            value = tuple(value)
        lines.append(f"{key} = {value if isinstance(value, str) else repr(value)}")
    return "\n".join(lines) + "\n"


def write_config_snapshot(values: Mapping[str, Any], out_dir: pathlib.Path) -> pathlib.Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    path.write_text(format_config(values), encoding="utf-8")
    return path


class TeacherTempMode(Enum):
    """Teacher temperature schedule"""

    WARMUP = "warmup"
    CONSTANT = "constant"

    @classmethod
    def _missing_(cls, value):
        aliases = {"ablation": cls.WARMUP, "virchow2": cls.WARMUP, "virchow2g": cls.CONSTANT}
        return aliases.get(value)


@dataclass
class TeacherTemperature:
    """Linear warmup from ``start`` to ``final``, then hold (constant when equal)"""

    final: float = 0.07
    start: float = 0.04
    warmup_fraction: float = 0.1

    @classmethod
    def from_value(cls, value: float | Tuple[float, float], warmup_fraction: float):
        if isinstance(value, (tuple, list)):
            final, start = value
            return cls(final=float(final), start=float(start), warmup_fraction=warmup_fraction)
        return cls(final=float(value), start=float(value), warmup_fraction=warmup_fraction)

    @property
    def mode(self) -> TeacherTempMode:
        return TeacherTempMode.CONSTANT if self.start == self.final else TeacherTempMode.WARMUP


@dataclass
class ProbeSettings:
    embedding: EmbeddingMode = EmbeddingMode.CLS_MEAN
    iterations: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-2
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    localized_tiles: int = 512


@dataclass
class DataSettings:
    n_slides: int = 16
    slide_size: int = 1792
    texture_classes: int = 4
    background_fraction: float = 0.3
    min_coverage: float = 0.5
    tile_size: int = 224


@dataclass
class TrainConfig:
    """Everything a pretraining or distillation run needs"""

    preset: str = BASE_PRESET
    seed: int = 0
    total_tiles: int = 128000
    batch_size: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(bottleneck_dim=64, hidden_dim=256))
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    views: EctConfig = field(
        default_factory=lambda: EctConfig(source_size=112, global_size=64, local_size=32, n_local=4)
    )
    method: ViewMethod = ViewMethod.ECT
    photometric: PhotometricPolicy = field(default_factory=PhotometricPolicy)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(base_lr=2e-3, batch_size=64))
    scale_lr: bool = True
    student_temperature: float = 0.1
    teacher_temperature: TeacherTemperature = field(default_factory=TeacherTemperature)
    teacher_momentum: Tuple[float, float] = (0.994, 1.0)
    student_ema_copy_momentum: float = 0.994
    sinkhorn_centering: bool = True
    sinkhorn_iterations: int = 3
    mask_ratio: float = 0.3
    checkpoint_every: int = 500
    log_every: int = 50
    rank_every: int = 50
    data: DataSettings = field(default_factory=DataSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    values: ConfigValues = field(default_factory=dict, repr=False)

    @property
    def steps(self) -> int:
        return self.total_tiles // self.batch_size

    @property
    def peak_lr(self) -> float:
        if self.scale_lr:
            return lr_scale(self.optim.base_lr, self.batch_size)
        return self.optim.base_lr

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.optim.warmup_frac * self.steps))

    @property
    def teacher_warmup_steps(self) -> int:
        return int(math.floor(self.teacher_temperature.warmup_fraction * self.steps))


def build_train_config(values: Mapping[str, Any]) -> TrainConfig:
    """Typed run configuration from a resolved (validated) mapping."""
    v = _normalize(values)
    model = ModelConfig(
        patch_size=v["patch_size"],
        embed_dim=v["embedding_dimension"],
        depth=v["layers"],
        heads=v["heads"],
        mlp_ratio=float(v["mlp_ratio"]),
        mlp_activation=v["mlp_activation"],
        registers=v["registers"],
        qk_norm=v["qk_normalization"],
        dual_patchnorm=v["dual_patchnorm"],
        image_size=v["global_view_size"],
        drop_path_rate=float(v["drop_rate"]),
    )
    if v["local_crops"] and v["local_view_size"] % v["patch_size"] != 0:
        raise ConfigError(
            f"local view size {v['local_view_size']} is not divisible by "
            f"patch size {v['patch_size']}"
        )
    head = HeadConfig(
        layers=v["head_layers"],
        bottleneck_dim=v["bottleneck_dimension"],
        hidden_dim=v["hidden_dimension"],
        prototypes=v["prototypes"],
        shared_heads=v["shared_heads"],
    )
    regularizer = RegularizerConfig(
        kind=v["regularizer"],
        kappa=float(v["regularizer_parameter"]),
        epsilon=float(v["koleo_epsilon"]),
        weight=float(v["regularizer_weight"]),
    )
    views = EctConfig(
        source_size=v["tile_context_size"],
        global_size=v["global_view_size"],
        local_size=v["local_view_size"],
        scale_range=v["scale_range"],
        aspect_range=v["aspect_ratio_range"],
        n_global=v["global_crops"],
        n_local=v["local_crops"],
    )
    photometric = PhotometricPolicy(
        vflip_p=0.5 if v["vertical_flips"] else 0.0,
        solarize_enabled=v["solarization"],
    )
    beta1, beta2 = v["optimizer_momentum"]
    optim = OptimConfig(
        rule=v["optimizer"],
        beta1=beta1,
        beta2=beta2,
        eps=float(v["optimizer_epsilon"]),
        base_lr=float(v["learning_rate"]),
        weight_decay_range=tuple(float(w) for w in v["optimizer_weight_decay"]),
        grad_clip_norm=float(v["gradient_clipping_norm"]),
        batch_size=v["batch_size"],
        warmup_frac=float(v["warmup_fraction"]),
    )
    return TrainConfig(
        preset=v["preset"],
        seed=v["seed"],
        total_tiles=v["total_tiles"],
        batch_size=v["batch_size"],
        model=model,
        head=head,
        regularizer=regularizer,
        views=views,
        method=ViewMethod(v["method"]),
        photometric=photometric,
        optim=optim,
        scale_lr=v["learning_rate_scaling"] == "sqrt_1024",
        student_temperature=float(v["student_temperature"]),
        teacher_temperature=TeacherTemperature.from_value(
            v["teacher_temperature"], float(v["teacher_temperature_warmup_fraction"])
        ),
        teacher_momentum=tuple(float(m) for m in v["teacher_momentum"]),
        student_ema_copy_momentum=float(v["student_ema_copy_momentum"]),
        sinkhorn_centering=v["sinkhorn_centering"],
        sinkhorn_iterations=v["sinkhorn_iterations"],
        mask_ratio=float(v["mask_ratio"]),
        checkpoint_every=v["checkpoint_every"],
        log_every=v["log_every"],
        rank_every=v["rank_every"],
        data=DataSettings(
            n_slides=v["n_slides"],
            slide_size=v["slide_size"],
            texture_classes=v["texture_classes"],
            background_fraction=float(v["background_fraction"]),
            min_coverage=float(v["min_coverage"]),
            tile_size=v["tile_size"],
        ),
        probe=ProbeSettings(
            embedding=EmbeddingMode(v["probe_embedding"]),
            iterations=v["probe_iterations"],
            batch_size=v["probe_batch_size"],
            learning_rate=float(v["probe_learning_rate"]),
            val_fraction=float(v["probe_val_fraction"]),
            test_fraction=float(v["probe_test_fraction"]),
            localized_tiles=v["probe_localized_tiles"],
        ),
        values=dict(v),
    )


def load_train_config(
    path: Optional[pathlib.Path] = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
    preset: Optional[str] = None,
) -> TrainConfig:
    return build_train_config(resolve_config(path, overrides, preset))
