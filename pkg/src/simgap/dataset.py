"""Dataset generation and every on-disk format.

A dataset is a directory with a JSON manifest plus per-scene files: scene
JSON, label PGM (P5, 8-bit, 0/255), and observation blobs (flat
little-endian float32, channel-major, JSON sidecar). Marginals are float32
blobs with a JSON header; prior grids are 16-bit max-scaled PGMs with a JSON
sidecar. Everything is reproducible byte for byte from (config, seed):
each scene owns a derived seed and is generated from it alone, so parallel
generation matches serial output exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bev, sampling, sensor, world
from .bev import GridSpec, LabelGrid, MarginalMap
from .sampling import NpcCountSampler, PriorGrid
from .world import MapSpec, NpcSpec, NuisanceParams, Pose2, Scene

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Primitive file formats


def write_pgm8(path, cells: np.ndarray) -> None:
    arr = (np.asarray(cells, dtype=np.uint8) * 255).astype(np.uint8) \
        if cells.max(initial=0) <= 1 else np.asarray(cells, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm8(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, pixels = _split_pgm(data)
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P5 PGM")
    w, h = dims
    return np.frombuffer(pixels, dtype=np.uint8, count=h * w).reshape(h, w)


def write_pgm16(path, values: np.ndarray) -> float:
    """Max-scaled 16-bit PGM; returns the scale (original max value)."""
    arr = np.asarray(values, dtype=np.float64)
    scale = float(arr.max()) if arr.size else 0.0
    scaled = np.zeros(arr.shape, dtype=">u2")
    if scale > 0:
        scaled = np.round(arr / scale * 65535.0).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(scaled.tobytes())
    return scale


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, pixels = _split_pgm(data)
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit P5 PGM")
    w, h = dims
    return np.frombuffer(pixels, dtype=">u2", count=h * w).reshape(h, w).astype(np.float64)


def _split_pgm(data: bytes):
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    return parts[0], (int(parts[1]), int(parts[2])), int(parts[3]), data[pos:]


def write_f32(path, array: np.ndarray, sidecar: dict) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    Path(str(path) + ".json").write_text(_dumps(sidecar))


def read_f32(path) -> tuple[np.ndarray, dict]:
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return flat, sidecar


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Typed formats


def save_observation(path, obs: np.ndarray) -> None:
    c, h, w = obs.shape
    write_f32(path, obs, {"C": c, "H": h, "W": w})


def load_observation(path) -> np.ndarray:
    flat, side = read_f32(path)
    return flat.reshape(side["C"], side["H"], side["W"])


def save_label(path, label: LabelGrid) -> None:
    write_pgm8(path, label.cells)


def load_label(path, spec: GridSpec) -> LabelGrid:
    arr = read_pgm8(path)
    return LabelGrid(cells=(arr > 127).astype(np.uint8), spec=spec)


def save_marginal(path, marginal: MarginalMap) -> None:
    h, w = marginal.freq.shape
    write_f32(path, marginal.freq, {
        "H": h, "W": w, "extent": marginal.spec.extent,
        "resolution": marginal.spec.resolution, "count": marginal.count,
    })


def load_marginal(path) -> MarginalMap:
    flat, side = read_f32(path)
    spec = GridSpec(extent=side["extent"], resolution=side["resolution"])
    return MarginalMap(freq=flat.reshape(side["H"], side["W"]).astype(np.float64),
                       count=side["count"], spec=spec)


def save_prior(path, prior: PriorGrid) -> None:
    """16-bit max-scaled PGM plus sidecar; quantization is lossy, the loader
    renormalizes back to a unit-mass grid."""
    scale = write_pgm16(path, prior.weights)
    h, w = prior.weights.shape
    Path(str(path) + ".json").write_text(_dumps({
        "H": h, "W": w, "extent": prior.extent,
        "resolution": prior.resolution, "scale": scale,
    }))


def load_prior(path) -> PriorGrid:
    side = json.loads(Path(str(path) + ".json").read_text())
    raw = read_pgm16(path) / 65535.0 * side["scale"]
    total = raw.sum()
    if total <= 0:
        raise ValueError("degenerate prior: stored grid has zero mass")
    return PriorGrid(weights=raw / total, extent=side["extent"], resolution=side["resolution"])


def scene_to_dict(scene: Scene) -> dict:
    return {
        "ego": {"x1": scene.ego.x1, "x2": scene.ego.x2, "yaw": scene.ego.yaw},
        "map_id": scene.map_id,
        "seed": scene.seed,
        "nuisance": {
            "weather": scene.nuisance.weather,
            "postprocess_on": scene.nuisance.postprocess_on,
            "palette_size": scene.nuisance.palette_size,
            "noise_std": scene.nuisance.noise_std,
        },
        "npcs": [
            {
                "pose": {"x1": n.pose.x1, "x2": n.pose.x2, "yaw": n.pose.yaw},
                "length": n.length, "width": n.width,
                "asset_id": n.asset_id, "color": list(n.color),
            }
            for n in scene.npcs
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        ego=Pose2(**d["ego"]),
        map_id=d["map_id"],
        seed=d["seed"],
        nuisance=NuisanceParams(**d["nuisance"]),
        npcs=[
            NpcSpec(pose=Pose2(**n["pose"]), length=n["length"], width=n["width"],
                    asset_id=n["asset_id"], color=tuple(n["color"]))
            for n in d["npcs"]
        ],
    )


# ---------------------------------------------------------------------------
# In-memory dataset


@dataclass
class ArrayDataset:
    """Scenes flattened into training arrays."""

    labels: np.ndarray          # (N, H, W) uint8
    grid: GridSpec
    observations: np.ndarray | None = None  # (N, 3, H, W) float32
    scenes: list[Scene] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def npc_counts(self) -> np.ndarray:
        if self.scenes is None:
            raise ValueError("dataset was loaded without scenes")
        return np.array([len(s.npcs) for s in self.scenes])

    def label_grids(self) -> list[LabelGrid]:
        return [LabelGrid(cells=self.labels[i], spec=self.grid) for i in range(len(self))]

    def marginal(self) -> MarginalMap:
        return bev.estimate_marginal(self.label_grids())


# ---------------------------------------------------------------------------
# Generation


def scene_seed_for(dataset_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=dataset_seed, spawn_key=(5, index))
    return int(ss.generate_state(2, np.uint64)[0])


@dataclass
class GenerationPlan:
    """Everything needed to generate one dataset, resolved from config."""

    map_spec: MapSpec
    sampler_kind: str
    prior: PriorGrid | None
    count: NpcCountSampler
    grid: GridSpec
    render_params: sensor.DomainRenderParams | None
    nuisance_weather_max: float
    nuisance_postprocess: bool
    nuisance_palette_size: int
    nuisance_noise_std: float
    assets: tuple
    scene_count: int
    seed: int
    description: dict = field(default_factory=dict)


def generate_scene(plan: GenerationPlan, index: int) -> tuple[Scene, LabelGrid, np.ndarray | None]:
    """Generate one scene (and label/observation) from its derived seed alone."""
    seed = scene_seed_for(plan.seed, index)
    rng = np.random.default_rng(seed)
    n = sampling.sample_npc_count(plan.count, rng)
    if plan.sampler_kind == "road_structure":
        npcs = sampling.road_structure_sample(plan.map_spec, n, Pose2(0, 0, 0), rng, plan.assets)
    else:
        npcs = sampling.sample_from_grid(plan.prior, n, rng, plan.map_spec, plan.assets)
    nuisance = NuisanceParams(
        weather=float(rng.uniform(0.0, plan.nuisance_weather_max)) if plan.nuisance_weather_max > 0 else 0.0,
        postprocess_on=plan.nuisance_postprocess,
        palette_size=plan.nuisance_palette_size,
        noise_std=plan.nuisance_noise_std,
    )
    scene = Scene(npcs=npcs, map_id=plan.map_spec.map_id, nuisance=nuisance, seed=seed)
    label = bev.rasterize(scene, plan.grid)
    obs = None
    if plan.render_params is not None:
        obs = sensor.render(scene, plan.map_spec, plan.grid, plan.render_params, rng)
    return scene, label, obs


def generate_dataset(plan: GenerationPlan, workers: int = 1) -> ArrayDataset:
    """Generate all scenes; output is identical for any worker count."""
    indices = range(plan.scene_count)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_one, [(plan, i) for i in indices], chunksize=64))
    else:
        results = [_gen_one((plan, i)) for i in indices]
    scenes = [r[0] for r in results]
    labels = np.stack([r[1].cells for r in results]) if results else \
        np.zeros((0,) + plan.grid.shape, np.uint8)
    obs = None
    if plan.render_params is not None and results:
        obs = np.stack([r[2] for r in results])
    return ArrayDataset(labels=labels, grid=plan.grid, observations=obs, scenes=scenes,
                        meta={"seed": plan.seed, **plan.description})


def _gen_one(args):
    plan, i = args
    return generate_scene(plan, i)


def rasterize_scenes(scenes: list[Scene], grid: GridSpec) -> MarginalMap:
    """Label marginal of a scene list on an arbitrary grid (e.g. the analysis grid)."""
    return bev.estimate_marginal([bev.rasterize(s, grid) for s in scenes])


# ---------------------------------------------------------------------------
# On-disk datasets with manifest


def save_dataset(ds: ArrayDataset, outdir) -> Path:
    outdir = Path(outdir)
    if ds.scenes is None:
        raise ValueError("cannot save a dataset without scenes")
    (outdir / "scenes").mkdir(parents=True, exist_ok=True)
    (outdir / "labels").mkdir(exist_ok=True)
    has_obs = ds.observations is not None
    if has_obs:
        (outdir / "obs").mkdir(exist_ok=True)
    records = []
    for i, scene in enumerate(ds.scenes):
        scene_rel = f"scenes/scene_{i:06d}.json"
        label_rel = f"labels/label_{i:06d}.pgm"
        (outdir / scene_rel).write_text(_dumps(scene_to_dict(scene)))
        write_pgm8(outdir / label_rel, ds.labels[i])
        rec = {"scene": scene_rel, "label": label_rel, "observation": None}
        sums = {
            "scene": sha256_file(outdir / scene_rel),
            "label": sha256_file(outdir / label_rel),
        }
        if has_obs:
            obs_rel = f"obs/obs_{i:06d}.f32"
            save_observation(outdir / obs_rel, ds.observations[i])
            rec["observation"] = obs_rel
            sums["observation"] = sha256_file(outdir / obs_rel)
        rec["sha256"] = sums
        records.append(rec)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": ds.meta.get("seed"),
        "scene_count": len(ds.scenes),
        "grid": {"extent": ds.grid.extent, "resolution": ds.grid.resolution},
        "sampler": {k: v for k, v in ds.meta.items() if k != "seed"},
        "records": records,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return outdir / "manifest.json"


class ManifestError(ValueError):
    pass


def verify_manifest(dataset_dir) -> dict:
    """Check existence and checksum of every referenced file; returns the manifest."""
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema {manifest.get('schema_version')}")
    for rec in manifest["records"]:
        for key in ("scene", "label", "observation"):
            rel = rec.get(key)
            if rel is None:
                continue
            path = dataset_dir / rel
            if not path.exists():
                raise ManifestError(f"missing file: {rel}")
            digest = sha256_file(path)
            if digest != rec["sha256"][key]:
                raise ManifestError(f"checksum mismatch: {rel}")
    return manifest


def load_dataset(dataset_dir, verify: bool = True, load_observations: bool = True) -> ArrayDataset:
    dataset_dir = Path(dataset_dir)
    manifest = verify_manifest(dataset_dir) if verify else \
        json.loads((dataset_dir / "manifest.json").read_text())
    grid = GridSpec(extent=manifest["grid"]["extent"], resolution=manifest["grid"]["resolution"])
    scenes, labels, obs = [], [], []
    want_obs = load_observations and all(r.get("observation") for r in manifest["records"])
    for rec in manifest["records"]:
        scenes.append(scene_from_dict(json.loads((dataset_dir / rec["scene"]).read_text())))
        labels.append((read_pgm8(dataset_dir / rec["label"]) > 127).astype(np.uint8))
        if want_obs:
            obs.append(load_observation(dataset_dir / rec["observation"]))
    return ArrayDataset(
        labels=np.stack(labels) if labels else np.zeros((0,) + grid.shape, np.uint8),
        grid=grid,
        observations=np.stack(obs) if want_obs and obs else None,
        scenes=scenes,
        meta={"seed": manifest.get("seed"), **manifest.get("sampler", {})},
    )
