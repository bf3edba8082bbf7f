"""Validated run configuration.

Configs are plain JSON; loading rejects unknown keys and reports range errors
with the offending field path. Numeric defaults follow the reference
hyperparameters used throughout: positive-pixel weight 2.13, discrepancy
coefficient 1.87, confidence threshold 0.9, reversal warm-up to 0.78 over 570
iterations, SGD-Nesterov momentum 0.9 with lr 0.01 and polynomial decay 0.70,
batches of 4 source + 4 target, 35 epochs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .adapt import STRATEGIES
from .bev import GridSpec
from .sampling import NpcCountSampler
from .world import MAP_IDS


class ConfigError(ValueError):
    """A config failed validation; the message names the field."""


SAMPLER_KINDS = ("spatial_prior", "road_structure", "target_prior", "blend", "uniform")
DOMAINS = ("sim", "real")

#: Default training view: the central 32 m x 32 m window at 64x64 (0.5 m cells,
#: so vehicle footprints span several cells).
TRAIN_GRID_EXTENT = 16.0
TRAIN_GRID_RESOLUTION = 0.5
#: Default analysis grid: the full 100 m x 100 m world at 0.5 m (200x200).
ANALYSIS_GRID_EXTENT = 50.0
ANALYSIS_GRID_RESOLUTION = 0.5


@dataclass
class GridConfig:
    extent: float = TRAIN_GRID_EXTENT
    resolution: float = TRAIN_GRID_RESOLUTION

    def validate(self, path: str):
        try:
            self.to_spec()
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e

    def to_spec(self) -> GridSpec:
        return GridSpec(extent=self.extent, resolution=self.resolution)


@dataclass
class CountConfig:
    kind: str = "uniform"
    lo: int = 0
    hi: int = 40
    n: int = 0
    histogram: dict = field(default_factory=dict)

    def validate(self, path: str):
        if self.kind not in ("uniform", "fixed", "empirical"):
            raise ConfigError(f"{path}.kind: unknown count sampler {self.kind!r}")
        try:
            self.to_sampler()
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e

    def to_sampler(self) -> NpcCountSampler:
        if self.kind == "uniform":
            return NpcCountSampler.uniform(self.lo, self.hi)
        if self.kind == "fixed":
            return NpcCountSampler.fixed(self.n)
        return NpcCountSampler.empirical({int(k): float(v) for k, v in self.histogram.items()})


@dataclass
class SamplerConfig:
    kind: str = "spatial_prior"
    alpha: float = 0.5
    prior_path: str | None = None

    def validate(self, path: str):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"{path}.kind: unknown sampler {self.kind!r} (choose from {SAMPLER_KINDS})")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"{path}.alpha: must be in [0,1]")


@dataclass
class NuisanceConfig:
    weather_max: float = 0.0
    postprocess_on: bool = False
    palette_size: int = 8
    noise_std: float = 0.0

    def validate(self, path: str):
        if not (0.0 <= self.weather_max <= 1.0):
            raise ConfigError(f"{path}.weather_max: must be in [0,1]")
        if self.palette_size < 1:
            raise ConfigError(f"{path}.palette_size: must be >= 1")
        if self.noise_std < 0:
            raise ConfigError(f"{path}.noise_std: must be >= 0")


@dataclass
class DatasetConfig:
    name: str = "source"
    domain: str = "sim"
    map_id: str = "grid_town"
    map_seed: int = 0
    world_extent: float = 50.0
    scene_count: int = 2000
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    count: CountConfig = field(default_factory=CountConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    render: bool = True
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    asset_count: int = 32
    path: str | None = None  # load a generated dataset instead of generating

    def validate(self, path: str):
        if self.domain not in DOMAINS:
            raise ConfigError(f"{path}.domain: must be one of {DOMAINS}")
        if self.map_id not in MAP_IDS:
            raise ConfigError(f"{path}.map_id: unknown map {self.map_id!r}")
        if self.world_extent <= 0:
            raise ConfigError(f"{path}.world_extent: must be positive")
        if self.scene_count < 0:
            raise ConfigError(f"{path}.scene_count: must be >= 0")
        if not (1 <= self.asset_count <= 32):
            raise ConfigError(f"{path}.asset_count: must be in [1, 32]")
        self.sampler.validate(f"{path}.sampler")
        self.count.validate(f"{path}.count")
        self.grid.validate(f"{path}.grid")
        self.nuisance.validate(f"{path}.nuisance")


@dataclass
class TrainParams:
    strategy: str = "fdal_pearson_pseudo"
    beta: float = 2.13
    lambda_dst: float = 1.87
    mu_pseudo: float = 1.0
    tau: float = 0.9
    lambda_max: float = 0.78
    warmup_iters: int = 570
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.70
    clip_norm: float | None = 5.0
    epochs: int = 35
    batch_source: int = 4
    batch_target: int = 4
    target_label_fraction: float = 0.0
    widths: tuple[int, int, int, int] = (32, 64, 128, 128)
    head_mid: int = 32
    critic_mid: int = 32
    augment_n: int = 2
    augment_m: int = 10
    eval_every: int = 1
    latent_l2: float = 0.005

    def validate(self, path: str):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"{path}.strategy: unknown strategy {self.strategy!r}")
        if self.beta <= 0:
            raise ConfigError(f"{path}.beta: must be positive")
        if not (0.5 < self.tau < 1.0):
            raise ConfigError(f"{path}.tau: must be in (0.5, 1)")
        if self.lambda_max < 0 or self.warmup_iters < 0:
            raise ConfigError(f"{path}: lambda_max and warmup_iters must be >= 0")
        if self.lr < 0:
            raise ConfigError(f"{path}.lr: must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"{path}.clip_norm: must be positive or null")
        if self.epochs < 1:
            raise ConfigError(f"{path}.epochs: must be >= 1")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError(f"{path}: batch sizes must be >= 1")
        if not (0.0 <= self.target_label_fraction <= 1.0):
            raise ConfigError(f"{path}.target_label_fraction: must be in [0,1]")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"{path}.widths: need 4 positive channel widths")
        if not (0 <= self.augment_m <= 30):
            raise ConfigError(f"{path}.augment_m: must be in [0, 30]")
        if self.augment_n < 0:
            raise ConfigError(f"{path}.augment_n: must be >= 0")
        if self.latent_l2 < 0:
            raise ConfigError(f"{path}.latent_l2: must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    source: DatasetConfig = field(default_factory=lambda: DatasetConfig(name="source"))
    target: DatasetConfig = field(default_factory=lambda: _default_target())
    target_val: DatasetConfig = field(default_factory=lambda: _default_target_val())
    train: TrainParams = field(default_factory=TrainParams)
    analysis_grid: GridConfig = field(default_factory=lambda: GridConfig(
        extent=ANALYSIS_GRID_EXTENT, resolution=ANALYSIS_GRID_RESOLUTION))
    reference_scene_count: int = 2000

    def validate(self, path: str = "config"):
        self.source.validate(f"{path}.source")
        self.target.validate(f"{path}.target")
        self.target_val.validate(f"{path}.target_val")
        self.train.validate(f"{path}.train")
        self.analysis_grid.validate(f"{path}.analysis_grid")
        if self.reference_scene_count < 1:
            raise ConfigError(f"{path}.reference_scene_count: must be >= 1")


def _default_target() -> DatasetConfig:
    return DatasetConfig(
        name="target", domain="real", map_id="straight",
        sampler=SamplerConfig(kind="target_prior"),
        nuisance=NuisanceConfig(weather_max=0.5, postprocess_on=True, palette_size=64),
    )


def _default_target_val() -> DatasetConfig:
    cfg = _default_target()
    cfg.name = "target_val"
    cfg.scene_count = 400
    return cfg


# ---------------------------------------------------------------------------
# JSON loading with unknown-key rejection


_NESTED = {
    (DatasetConfig, "sampler"): SamplerConfig,
    (DatasetConfig, "count"): CountConfig,
    (DatasetConfig, "grid"): GridConfig,
    (DatasetConfig, "nuisance"): NuisanceConfig,
    (RunConfig, "source"): DatasetConfig,
    (RunConfig, "target"): DatasetConfig,
    (RunConfig, "target_val"): DatasetConfig,
    (RunConfig, "train"): TrainParams,
    (RunConfig, "analysis_grid"): GridConfig,
}
_TUPLE_FIELDS = {(TrainParams, "widths")}


def build_config(cls, data, path: str):
    """Construct a config dataclass from parsed JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            value = build_config(sub, value, f"{path}.{name}")
        elif (cls, name) in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{name}: expected a list")
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        data = json.load(f)
    cfg = build_config(RunConfig, data, "config")
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def _clean(x):
        if isinstance(x, dict):
            return {k: _clean(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [_clean(v) for v in x]
        if isinstance(x, list):
            return [_clean(v) for v in x]
        return x

    return _clean(d)


def default_config_json(preset: str | None = None, seed: int = 0) -> str:
    cfg = preset_config(preset, seed) if preset else RunConfig(seed=seed)
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Presets


def gap_standard(seed: int = 0) -> RunConfig:
    """The standard sim-to-real gap: 2000 + 2000 scenes, 64x64 grid, 35 epochs.

    Channel widths are halved relative to the config default to keep a full
    run in the minutes range on one CPU core.
    """
    cfg = RunConfig(seed=seed)
    cfg.train.widths = (16, 32, 64, 64)
    return cfg


def sweep_light(seed: int = 0) -> RunConfig:
    """Reduced preset for multi-point sweeps: fewer scenes and epochs."""
    cfg = RunConfig(seed=seed)
    cfg.source.scene_count = 1000
    cfg.target.scene_count = 1000
    cfg.target_val.scene_count = 300
    cfg.reference_scene_count = 1000
    cfg.train.epochs = 15
    cfg.train.widths = (16, 32, 64, 64)
    return cfg


_PRESETS = {"gap_standard": gap_standard, "sweep_light": sweep_light}


def preset_config(name: str, seed: int = 0) -> RunConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {sorted(_PRESETS)})")
    return _PRESETS[name](seed)
