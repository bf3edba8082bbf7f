"""Experiment pipeline: config -> datasets -> training -> evaluation.

Also defines the lab's "real world": a fixed placement density over the
straight map (smooth lateral falloff around the ego axis with extra mass on
the road). Real-domain datasets sample NPC locations from it, and analysis
measures every source dataset's label-marginal divergence against a held-out
dataset drawn from the same density.
"""

from __future__ import annotations

import csv
import json
import math
from copy import deepcopy
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import adapt, bev, dataset as ds, sampling, sensor, world
from .adapt import LossWeights, TrainSettings
from .bev import GridSpec, MarginalMap
from .config import ConfigError, DatasetConfig, RunConfig, config_to_dict
from .dataset import ArrayDataset, GenerationPlan
from .nn import GrlSchedule, ModelConfig, OptimizerConfig
from .sampling import BlendSpec, PriorGrid, SpatialPrior

#: Lateral falloff scale (m) of the real-world placement density.
REAL_LATERAL_SCALE = 18.0
#: Density multiplier on drivable cells of the real map.
REAL_ROAD_BOOST = 2.0
#: Placement grids discretize priors at this resolution (m).
PLACEMENT_RESOLUTION = 0.5


def real_world_prior(extent: float = 50.0, resolution: float = PLACEMENT_RESOLUTION,
                     map_seed: int = 0) -> PriorGrid:
    """The designated real-domain placement density on the straight map."""
    m = world.build_map("straight", extent, map_seed)
    n = int(round(2.0 * extent / resolution))
    centers = -extent + (np.arange(n) + 0.5) * resolution
    X1, X2 = np.meshgrid(centers, centers, indexing="ij")
    lateral = np.exp(-np.abs(X2) / REAL_LATERAL_SCALE)
    road = m.drivable_at(X1.ravel(), X2.ravel()).reshape(X1.shape)
    w = lateral * (1.0 + REAL_ROAD_BOOST * road)
    return PriorGrid(weights=w / w.sum(), extent=extent, resolution=resolution)


def _resolve_prior(cfg: DatasetConfig) -> PriorGrid | None:
    kind = cfg.sampler.kind
    if kind == "road_structure":
        return None
    extent = cfg.world_extent
    if kind == "spatial_prior":
        return sampling.prior_to_grid(SpatialPrior(), extent, PLACEMENT_RESOLUTION)
    if kind == "uniform":
        n = int(round(2.0 * extent / PLACEMENT_RESOLUTION))
        w = np.full((n, n), 1.0 / (n * n))
        return PriorGrid(weights=w, extent=extent, resolution=PLACEMENT_RESOLUTION)
    if kind in ("target_prior", "blend"):
        if cfg.sampler.prior_path is not None:
            target = sampling.target_prior_from_marginal(ds.load_marginal(cfg.sampler.prior_path))
        else:
            target = real_world_prior(extent)
        if kind == "target_prior":
            return target
        spatial = sampling.prior_to_grid(SpatialPrior(), extent, PLACEMENT_RESOLUTION)
        return sampling.blend(BlendSpec(alpha=cfg.sampler.alpha, a=spatial, b=target))
    raise ConfigError(f"unknown sampler kind {kind!r}")


def resolve_plan(cfg: DatasetConfig, seed: int) -> GenerationPlan:
    """Turn a dataset config plus seed into a concrete generation plan."""
    map_spec = world.build_map(cfg.map_id, cfg.world_extent, cfg.map_seed)
    render_params = None
    if cfg.render:
        render_params = sensor.sim_preset() if cfg.domain == "sim" else sensor.real_preset()
    return GenerationPlan(
        map_spec=map_spec,
        sampler_kind=cfg.sampler.kind,
        prior=_resolve_prior(cfg),
        count=cfg.count.to_sampler(),
        grid=cfg.grid.to_spec(),
        render_params=render_params,
        nuisance_weather_max=cfg.nuisance.weather_max,
        nuisance_postprocess=cfg.nuisance.postprocess_on,
        nuisance_palette_size=cfg.nuisance.palette_size,
        nuisance_noise_std=cfg.nuisance.noise_std,
        assets=tuple(world.asset_table()[: cfg.asset_count]),
        scene_count=cfg.scene_count,
        seed=seed,
        description={
            "name": cfg.name, "domain": cfg.domain, "map_id": cfg.map_id,
            "sampler": cfg.sampler.kind, "world_extent": cfg.world_extent,
        },
    )


def dataset_from_config(cfg: DatasetConfig, seed: int, workers: int = 1) -> ArrayDataset:
    """Load the dataset from disk when a path is configured, else generate it."""
    if cfg.path is not None:
        return ds.load_dataset(cfg.path)
    return ds.generate_dataset(resolve_plan(cfg, seed), workers=workers)


def _derived_seed(seed: int, tag: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(tag,))
    return int(ss.generate_state(2, np.uint64)[0] % (2**63))


SEED_SOURCE, SEED_TARGET, SEED_TARGET_VAL, SEED_REFERENCE = 21, 22, 23, 24


def reference_marginal(cfg: RunConfig) -> MarginalMap:
    """Held-out real-domain marginal on the analysis grid (labels only)."""
    ref_cfg = deepcopy(cfg.target)
    ref_cfg.name = "reference"
    ref_cfg.render = False
    ref_cfg.scene_count = cfg.reference_scene_count
    ref_cfg.grid = deepcopy(cfg.analysis_grid)
    plan = resolve_plan(ref_cfg, _derived_seed(cfg.seed, SEED_REFERENCE))
    data = ds.generate_dataset(plan)
    return data.marginal()


@dataclass
class ExperimentResult:
    final_iou: float
    jsd_source_to_reference: float
    epoch_evals: list
    metrics: list
    model: object
    source_marginal: MarginalMap
    reference: MarginalMap


def train_settings_from(cfg: RunConfig) -> TrainSettings:
    t = cfg.train
    return TrainSettings(
        strategy=t.strategy,
        weights=LossWeights(beta=t.beta, lambda_dst=t.lambda_dst,
                            mu_pseudo=t.mu_pseudo, tau=t.tau),
        schedule=GrlSchedule(lambda_max=t.lambda_max, warmup_iters=t.warmup_iters),
        optimizer=OptimizerConfig(lr=t.lr, momentum=t.momentum, poly_power=t.poly_power,
                                  clip_norm=t.clip_norm),
        epochs=t.epochs,
        batch_source=t.batch_source,
        batch_target=t.batch_target,
        target_label_fraction=t.target_label_fraction,
        augment=sensor.AugmentPolicy(n_ops=t.augment_n, magnitude=t.augment_m),
        seed=cfg.seed,
        eval_every=t.eval_every,
        latent_l2=t.latent_l2,
    )


def model_config_from(cfg: RunConfig) -> ModelConfig:
    grid = cfg.source.grid.to_spec()
    return ModelConfig(grid_size=grid.size, widths=tuple(cfg.train.widths),
                       head_mid=cfg.train.head_mid, critic_mid=cfg.train.critic_mid)


def run_experiment(cfg: RunConfig, out_dir=None, resume_from=None,
                   checkpoint_every: int = 0, workers: int = 1) -> ExperimentResult:
    """Generate (or load) datasets, compute the marginal diagnostic, train, evaluate."""
    cfg.validate()
    source = dataset_from_config(cfg.source, _derived_seed(cfg.seed, SEED_SOURCE), workers)
    target = dataset_from_config(cfg.target, _derived_seed(cfg.seed, SEED_TARGET), workers)
    target_val = dataset_from_config(cfg.target_val, _derived_seed(cfg.seed, SEED_TARGET_VAL), workers)
    if source.observations is None or target.observations is None:
        raise ConfigError("training requires rendered observations (set render=true)")

    analysis_grid = cfg.analysis_grid.to_spec()
    ref = reference_marginal(cfg)
    if source.scenes is not None:
        src_marginal = ds.rasterize_scenes(source.scenes, analysis_grid)
    else:
        src_marginal = source.marginal()
    jsd_val = bev.jsd(src_marginal, ref)

    settings = train_settings_from(cfg)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.ckpt"
    result = adapt.train(model_config_from(cfg), source, target, settings,
                         eval_dataset=target_val, checkpoint_path=ckpt_path,
                         checkpoint_every=checkpoint_every, resume_from=resume_from)
    final_iou = result.final_iou if result.final_iou is not None else float("nan")

    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", result.metrics)
        _, per_scene = adapt.evaluate(result.model, target_val)
        write_eval_csv(out_dir / "eval.csv", per_scene)
        ds.save_marginal(out_dir / "source_marginal.f32", src_marginal)
        ds.save_marginal(out_dir / "reference_marginal.f32", ref)
        report = {
            "final_iou": final_iou,
            "jsd_source_to_reference": jsd_val,
            "epoch_evals": [[e, v] for e, v in result.epoch_evals],
            "config": config_to_dict(cfg),
        }
        (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))

    return ExperimentResult(final_iou=final_iou, jsd_source_to_reference=jsd_val,
                            epoch_evals=result.epoch_evals, metrics=result.metrics,
                            model=result.model, source_marginal=src_marginal, reference=ref)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(adapt.METRIC_COLUMNS))
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


def write_eval_csv(path, per_scene: list[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene_id", "iou"])
        for i, v in enumerate(per_scene):
            writer.writerow([i, f"{v:.6f}"])


# ---------------------------------------------------------------------------
# Sweeps


SWEEP_AXES = ("sampler", "asset_count", "weather", "postprocess", "palette",
              "npc_count", "strategy", "target_label_fraction")


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    """Return a copy of cfg with one ablation axis set to `value`."""
    cfg = deepcopy(cfg)
    if axis == "sampler":
        if isinstance(value, str):
            cfg.source.sampler.kind = value
        else:
            cfg.source.sampler.kind = value["kind"]
            if "alpha" in value:
                cfg.source.sampler.alpha = float(value["alpha"])
            if "map_id" in value:
                cfg.source.map_id = value["map_id"]
    elif axis == "asset_count":
        cfg.source.asset_count = int(value)
    elif axis == "weather":
        cfg.source.nuisance.weather_max = float(value)
    elif axis == "postprocess":
        cfg.source.nuisance.postprocess_on = bool(value)
    elif axis == "palette":
        cfg.source.nuisance.palette_size = int(value)
    elif axis == "npc_count":
        from .config import CountConfig, build_config
        cfg.source.count = build_config(CountConfig, value, "sweep.npc_count")
    elif axis == "strategy":
        cfg.train.strategy = str(value)
    elif axis == "target_label_fraction":
        cfg.train.target_label_fraction = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r} (choose from {SWEEP_AXES})")
    cfg.validate()
    return cfg


def run_sweep_point(args) -> dict:
    """One sweep point; failures are reported in the row, not raised."""
    base_cfg, axis, value, seed = args
    row = {"axis": axis, "value": json.dumps(value), "seed": seed,
           "jsd": "", "final_iou": "", "error": ""}
    try:
        cfg = apply_axis(base_cfg, axis, value)
        cfg.seed = seed
        res = run_experiment(cfg)
        row["jsd"] = f"{res.jsd_source_to_reference:.8e}"
        row["final_iou"] = f"{res.final_iou:.6f}"
    except Exception as e:  # recorded, sweep continues
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def run_sweep(base_cfg: RunConfig, axis: str, values: list, seeds: list[int],
              out_dir=None, workers: int = 1) -> tuple[list[dict], dict]:
    """Run generate/train/eval per (value, seed) point; aggregate one CSV row each."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (choose from {SWEEP_AXES})")
    points = [(base_cfg, axis, v, s) for v in values for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_sweep_point, points))
    else:
        rows = [run_sweep_point(p) for p in points]

    summary: dict = {"axis": axis, "points": len(rows),
                     "failed": sum(1 for r in rows if r["error"])}
    good = [r for r in rows if not r["error"]]
    if axis == "sampler" and len(good) >= 3:
        from scipy.stats import spearmanr

        jsds = [float(r["jsd"]) for r in good]
        ious = [float(r["final_iou"]) for r in good]
        rho, pval = spearmanr(jsds, ious)
        summary["spearman_jsd_iou"] = float(rho)
        summary["spearman_pvalue"] = float(pval)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["axis", "value", "seed", "jsd",
                                                   "final_iou", "error"])
            writer.writeheader()
            writer.writerows(rows)
        (out_dir / "sweep_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return rows, summary
