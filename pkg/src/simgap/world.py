"""Procedural top-down driving worlds.

Maps are binary drivable masks with spawn candidates on a 1 m lattice; scenes
hold an ego vehicle at the origin plus non-overlapping NPC rectangles. All
geometry lives in the ego frame: x1 is longitudinal (+ forward), x2 lateral
(+ left), yaw counterclockwise in [0, 2*pi).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

TWO_PI = 2.0 * math.pi

MAP_IDS = ("straight", "curved", "intersection", "grid_town")

#: Resolution of the drivable mask, meters per cell.
MASK_RESOLUTION = 0.5
#: Spacing of spawn candidates over the drivable area, meters.
CANDIDATE_PITCH = 1.0
#: All roads are 8 m wide.
ROAD_HALF_WIDTH = 4.0

# NPC footprint bounds enforced by the asset table.
MIN_NPC_LENGTH, MAX_NPC_LENGTH = 2.0, 12.0
MIN_NPC_WIDTH, MAX_NPC_WIDTH = 1.2, 3.0


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    return float(yaw) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """Planar pose in the ego frame (meters, radians)."""

    x1: float
    x2: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x1) and math.isfinite(self.x2) and math.isfinite(self.yaw)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "x1", float(self.x1))
        object.__setattr__(self, "x2", float(self.x2))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))


@dataclass(frozen=True)
class Asset:
    """One entry of the vehicle asset table."""

    length: float
    width: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class NpcSpec:
    """A placed vehicle: oriented rectangle plus appearance."""

    pose: Pose2
    length: float
    width: float
    asset_id: int
    color: tuple[float, float, float]

    def __post_init__(self):
        if not (MIN_NPC_LENGTH <= self.length <= MAX_NPC_LENGTH):
            raise ValueError(f"npc length {self.length} outside [{MIN_NPC_LENGTH}, {MAX_NPC_LENGTH}]")
        if not (MIN_NPC_WIDTH <= self.width <= MAX_NPC_WIDTH):
            raise ValueError(f"npc width {self.width} outside [{MIN_NPC_WIDTH}, {MAX_NPC_WIDTH}]")
        if len(self.color) != 3 or any(not (0.0 <= c <= 1.0) for c in self.color):
            raise ValueError("npc color must be an RGB triple in [0,1]")


@dataclass
class NuisanceParams:
    """Per-scene appearance knobs, sampled at dataset generation time."""

    weather: float = 0.0
    postprocess_on: bool = False
    palette_size: int = 8
    noise_std: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.weather <= 1.0):
            raise ValueError("weather must be in [0,1]")
        if self.palette_size < 1:
            raise ValueError("palette_size must be positive")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Scene:
    """A generated scene: ego at the origin plus NPC rectangles.

    The no-overlap invariant is maintained by `try_place`; code that
    constructs scenes directly is responsible for it.
    """

    npcs: list[NpcSpec] = field(default_factory=list)
    map_id: str = "straight"
    nuisance: NuisanceParams = field(default_factory=NuisanceParams)
    seed: int = 0
    ego: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))

    def npc_arrays(self):
        """NPC geometry as flat arrays (x1, x2, yaw, length, width)."""
        if not self.npcs:
            z = np.zeros(0)
            return z, z, z, z, z
        x1 = np.array([n.pose.x1 for n in self.npcs])
        x2 = np.array([n.pose.x2 for n in self.npcs])
        yaw = np.array([n.pose.yaw for n in self.npcs])
        length = np.array([n.length for n in self.npcs])
        width = np.array([n.width for n in self.npcs])
        return x1, x2, yaw, length, width


@dataclass
class MapSpec:
    """A map: drivable mask plus lane-aligned spawn candidates.

    `drivable` is indexed [i, j] with i along x1 and j along x2; the cell
    (i, j) is centered at (-extent + (i+.5)*resolution, -extent + (j+.5)*resolution).
    `candidates` has shape (N, 3) with columns (x1, x2, lane yaw).
    """

    map_id: str
    extent: float
    resolution: float
    drivable: np.ndarray
    candidates: np.ndarray

    def drivable_at(self, x1, x2):
        """Vectorized lookup of the drivable mask at world coordinates."""
        i = np.floor((np.asarray(x1) + self.extent) / self.resolution).astype(int)
        j = np.floor((np.asarray(x2) + self.extent) / self.resolution).astype(int)
        n = self.drivable.shape[0]
        i = np.clip(i, 0, n - 1)
        j = np.clip(j, 0, n - 1)
        return self.drivable[i, j]

    def spawn_poses(self) -> list[Pose2]:
        return [Pose2(float(a), float(b), float(y)) for a, b, y in self.candidates]


# ---------------------------------------------------------------------------
# Asset table


def generate_asset_table(seed: int = 20240 , count: int = 32) -> list[Asset]:
    """Regenerate the frozen asset table (cars, vans, buses with RGB colors)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    assets = []
    for _ in range(count):
        kind = rng.random()
        if kind < 0.7:  # passenger car
            length = float(np.clip(rng.normal(4.6, 0.35), 3.8, 5.4))
            width = float(rng.uniform(1.7, 2.0))
        elif kind < 0.9:  # van / truck
            length = float(rng.uniform(5.5, 8.0))
            width = float(rng.uniform(2.0, 2.5))
        else:  # bus
            length = float(rng.uniform(9.0, 12.0))
            width = float(rng.uniform(2.5, 3.0))
        color = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))
        assets.append(Asset(length=length, width=width, color=color))
    return assets


@lru_cache(maxsize=1)
def asset_table() -> tuple[Asset, ...]:
    """The 32-entry asset table shipped with the package."""
    raw = json.loads(resources.files("simgap.data").joinpath("assets.json").read_text())
    return tuple(Asset(length=a["length"], width=a["width"], color=tuple(a["color"])) for a in raw)


# ---------------------------------------------------------------------------
# Oriented-rectangle geometry (separating axis test)


def footprint_corners(x1, x2, yaw, length, width):
    """Corners of oriented rectangles, shape (N, 4, 2)."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    yaw = np.atleast_1d(np.asarray(yaw, dtype=float))
    hl = np.atleast_1d(np.asarray(length, dtype=float)) / 2.0
    hw = np.atleast_1d(np.asarray(width, dtype=float)) / 2.0
    c, s = np.cos(yaw), np.sin(yaw)
    # local corners (+-hl, +-hw) rotated into the ego frame
    local = np.stack(
        [np.stack([hl, hw], -1), np.stack([-hl, hw], -1), np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1)],
        axis=1,
    )  # (N, 4, 2)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)  # (N, 2, 2)
    world = np.einsum("nij,nkj->nki", rot, local)
    world[:, :, 0] += x1[:, None]
    world[:, :, 1] += x2[:, None]
    return world


def rect_axes(yaw):
    """The two edge-normal axes of each rectangle, shape (N, 2, 2)."""
    yaw = np.atleast_1d(np.asarray(yaw, dtype=float))
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], axis=1)


def rects_overlap(corners_new: np.ndarray, axes_new: np.ndarray,
                  corners_all: np.ndarray, axes_all: np.ndarray) -> np.ndarray:
    """Strict-interior overlap of one rectangle against N others.

    Exact edge/corner contact does not count as overlap (separation of
    measure zero is allowed). Returns a boolean array of shape (N,).
    """
    n = corners_all.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    # Project everything on the candidate's two axes.
    pa = corners_new @ axes_new.T  # (4, 2)
    pb = np.einsum("nkj,aj->nka", corners_all, axes_new)  # (N, 4, 2)
    lo_a, hi_a = pa.min(0), pa.max(0)  # (2,)
    lo_b, hi_b = pb.min(1), pb.max(1)  # (N, 2)
    ok_on_new = (lo_a[None, :] < hi_b) & (lo_b < hi_a[None, :])  # (N, 2)
    # Project everything on each existing rectangle's own axes.
    qa = np.einsum("kj,naj->nka", corners_new, axes_all)  # (N, 4, 2)
    qb = np.einsum("nkj,naj->nka", corners_all, axes_all)  # (N, 4, 2)
    lo_qa, hi_qa = qa.min(1), qa.max(1)
    lo_qb, hi_qb = qb.min(1), qb.max(1)
    ok_on_all = (lo_qa < hi_qb) & (lo_qb < hi_qa)
    return ok_on_new.all(axis=1) & ok_on_all.all(axis=1)


def npc_overlaps_scene(scene: Scene, npc: NpcSpec) -> bool:
    """True if the NPC's rectangle strictly overlaps any NPC already placed."""
    if not scene.npcs:
        return False
    x1, x2, yaw, length, width = scene.npc_arrays()
    corners_all = footprint_corners(x1, x2, yaw, length, width)
    axes_all = rect_axes(yaw)
    corners_new = footprint_corners(npc.pose.x1, npc.pose.x2, npc.pose.yaw, npc.length, npc.width)[0]
    axes_new = rect_axes(npc.pose.yaw)[0]
    return bool(rects_overlap(corners_new, axes_new, corners_all, axes_all).any())


def try_place(scene: Scene, npc: NpcSpec, extent_m: float) -> bool:
    """Append `npc` to the scene unless it collides or its center is out of bounds.

    Returns True on success; the scene is left untouched on rejection.
    """
    if abs(npc.pose.x1) > extent_m or abs(npc.pose.x2) > extent_m:
        return False
    if npc_overlaps_scene(scene, npc):
        return False
    scene.npcs.append(npc)
    return True


# ---------------------------------------------------------------------------
# Map construction


def _cell_centers(extent: float, resolution: float) -> np.ndarray:
    n = int(round(2.0 * extent / resolution))
    return -extent + (np.arange(n) + 0.5) * resolution


def _band(coords: np.ndarray, center: float) -> np.ndarray:
    return np.abs(coords - center) <= ROAD_HALF_WIDTH


def _street_centers(rng: np.random.Generator, extent: float, anchor_zero: bool) -> list[float]:
    """Street centerlines with seeded 30-60 m gaps, optionally anchored at 0."""
    centers = [0.0] if anchor_zero else [float(rng.uniform(-12.0, 12.0))]
    c = centers[0]
    while True:
        c += float(rng.uniform(30.0, 60.0))
        if c > extent - 2.0:
            break
        centers.append(c)
    c = centers[0]
    while True:
        c -= float(rng.uniform(30.0, 60.0))
        if c < -extent + 2.0:
            break
        centers.append(c)
    return sorted(centers)


def build_map(map_id: str, extent_m: float, rng_seed: int = 0) -> MapSpec:
    """Build one of the four map archetypes, deterministically in all inputs."""
    if map_id not in MAP_IDS:
        raise ValueError(f"unknown map: {map_id!r}")
    if extent_m <= 0:
        raise ValueError("extent_m must be positive")
    extent = float(extent_m)
    coords = _cell_centers(extent, MASK_RESOLUTION)
    X1, X2 = np.meshgrid(coords, coords, indexing="ij")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(101,)))

    if map_id == "straight":
        drivable = np.abs(X2) <= ROAD_HALF_WIDTH
        h_streets, v_streets = [0.0], []
        ring = None
    elif map_id == "intersection":
        drivable = (np.abs(X2) <= ROAD_HALF_WIDTH) | (np.abs(X1) <= ROAD_HALF_WIDTH)
        h_streets, v_streets = [0.0], [0.0]
        ring = None
    elif map_id == "curved":
        radius = extent / 2.0
        d = np.hypot(X1, X2 - radius)
        drivable = np.abs(d - radius) <= ROAD_HALF_WIDTH
        h_streets, v_streets = [], []
        ring = (0.0, radius, radius)
    else:  # grid_town
        h_streets = _street_centers(rng, extent, anchor_zero=True)
        v_streets = _street_centers(rng, extent, anchor_zero=False)
        drivable = np.zeros_like(X1, dtype=bool)
        for c in h_streets:
            drivable |= _band(X2, c)
        for c in v_streets:
            drivable |= _band(X1, c)
        ring = None

    candidates = _spawn_candidates(extent, drivable, h_streets, v_streets, ring)
    return MapSpec(map_id=map_id, extent=extent, resolution=MASK_RESOLUTION,
                   drivable=drivable, candidates=candidates)


def _spawn_candidates(extent, drivable, h_streets, v_streets, ring) -> np.ndarray:
    """Lane-aligned spawn poses on a 1 m lattice over the drivable area."""
    pitch = CANDIDATE_PITCH
    n = int(round(2.0 * extent / pitch))
    axis = -extent + (np.arange(n) + 0.5) * pitch
    X1, X2 = np.meshgrid(axis, axis, indexing="ij")
    x1 = X1.ravel()
    x2 = X2.ravel()
    i = np.floor((x1 + extent) / MASK_RESOLUTION).astype(int)
    j = np.floor((x2 + extent) / MASK_RESOLUTION).astype(int)
    keep = drivable[np.clip(i, 0, drivable.shape[0] - 1), np.clip(j, 0, drivable.shape[1] - 1)]
    x1, x2 = x1[keep], x2[keep]

    if ring is not None:
        cx, cy, radius = ring
        rx, ry = x1 - cx, x2 - cy
        r = np.hypot(rx, ry)
        r = np.where(r == 0, 1.0, r)
        # tangent direction; inner lane runs counterclockwise, outer clockwise
        inner = r < radius
        tx = np.where(inner, -ry / r, ry / r)
        ty = np.where(inner, rx / r, -rx / r)
        yaw = np.arctan2(ty, tx) % TWO_PI
        return np.stack([x1, x2, yaw], axis=1)

    yaw = np.zeros_like(x1)
    h_centers = np.asarray(h_streets) if h_streets else None
    v_centers = np.asarray(v_streets) if v_streets else None
    d_h = np.full_like(x1, np.inf)
    d_v = np.full_like(x1, np.inf)
    h_near = v_near = None
    if h_centers is not None:
        k = np.argmin(np.abs(x2[:, None] - h_centers[None, :]), axis=1)
        h_near = h_centers[k]
        d_h = np.abs(x2 - h_near)
    if v_centers is not None:
        k = np.argmin(np.abs(x1[:, None] - v_centers[None, :]), axis=1)
        v_near = v_centers[k]
        d_v = np.abs(x1 - v_near)
    on_h = d_h <= d_v
    if h_near is not None:
        # right-hand traffic: the lane below the centerline heads forward
        yaw = np.where(on_h & (x2 <= h_near), 0.0, yaw)
        yaw = np.where(on_h & (x2 > h_near), math.pi, yaw)
    if v_near is not None:
        yaw = np.where(~on_h & (x1 > v_near), 0.5 * math.pi, yaw)
        yaw = np.where(~on_h & (x1 <= v_near), 1.5 * math.pi, yaw)
    return np.stack([x1, x2, yaw], axis=1)
