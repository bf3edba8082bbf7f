"""NPC placement strategies.

Three families: a hand-designed spatial prior over lateral offset, empirical
target priors estimated from label marginals (and blends of the two), and a
road-structure sampler that draws lane-aligned spawn candidates weighted by
distance to the ego. Placement always goes through the collision-rejecting
`world.try_place`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import world
from .world import Asset, MapSpec, NpcSpec, Pose2, Scene

#: Breakpoints (m) and unnormalized densities of the lateral spatial prior.
SPATIAL_BREAKPOINTS = (0.0, 12.5, 50.0)
SPATIAL_VALUES = (0.6, 0.5, 0.0)

#: Road-structure sampling: candidates closer than this to the ego are excluded.
MIN_EGO_DISTANCE = 5.0
#: Road-structure sampling: exponential distance weighting scale, meters.
DISTANCE_WEIGHT_SCALE = 25.0


@dataclass(frozen=True)
class SpatialPrior:
    """Piecewise-linear placement density over |x2|, independent of x1."""

    breakpoints: tuple[float, float, float] = SPATIAL_BREAKPOINTS
    values: tuple[float, float, float] = SPATIAL_VALUES

    def density(self, x2):
        return spatial_prior_density(x2)


def spatial_prior_density(x2):
    """Unnormalized placement density at lateral offset x2 (vectorized).

    Linear from 0.6 at |x2|=0 down to 0.5 at |x2|=12.5, then down to 0 at
    |x2|=50; zero beyond.
    """
    a = np.abs(np.asarray(x2, dtype=float))
    out = np.where(
        a <= 12.5,
        -a / 125.0 + 0.6,
        np.where(a <= 50.0, -(a - 50.0) / 75.0, 0.0),
    )
    if np.isscalar(x2) or np.ndim(x2) == 0:
        return float(out)
    return out


@dataclass
class PriorGrid:
    """Normalized placement density over BEV cells.

    weights[i, j] indexes x1 by row and x2 by column, same convention as
    `bev.GridSpec`; weights are non-negative and sum to one.
    """

    weights: np.ndarray
    extent: float
    resolution: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights < 0).any():
            raise ValueError("prior weights must be non-negative")
        total = float(self.weights.sum())
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"prior weights must sum to 1, got {total}")

    def same_geometry(self, other: "PriorGrid") -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.extent == other.extent
            and self.resolution == other.resolution
        )

    def cell_centers(self):
        n = self.weights.shape[0]
        axis = -self.extent + (np.arange(n) + 0.5) * self.resolution
        return axis


@dataclass(frozen=True)
class BlendSpec:
    """Convex combination of two priors on the same grid."""

    alpha: float
    a: PriorGrid
    b: PriorGrid

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0,1]")


@dataclass(frozen=True)
class NpcCountSampler:
    """Scene vehicle-count distribution: uniform(lo,hi), fixed(n), or empirical."""

    kind: str
    lo: int = 0
    hi: int = 0
    n: int = 0
    values: tuple[int, ...] = ()
    probs: tuple[float, ...] = ()

    @staticmethod
    def uniform(lo: int, hi: int) -> "NpcCountSampler":
        if hi < lo or lo < 0:
            raise ValueError("need 0 <= lo <= hi")
        return NpcCountSampler(kind="uniform", lo=lo, hi=hi)

    @staticmethod
    def fixed(n: int) -> "NpcCountSampler":
        if n < 0:
            raise ValueError("count must be non-negative")
        return NpcCountSampler(kind="fixed", n=n)

    @staticmethod
    def empirical(histogram: dict[int, float]) -> "NpcCountSampler":
        if not histogram:
            raise ValueError("empirical histogram must be nonempty")
        values = tuple(sorted(histogram))
        weights = np.array([histogram[v] for v in values], dtype=float)
        if (weights < 0).any() or weights.sum() <= 0:
            raise ValueError("histogram weights must be non-negative with positive mass")
        probs = tuple((weights / weights.sum()).tolist())
        return NpcCountSampler(kind="empirical", values=values, probs=probs)


def sample_npc_count(s: NpcCountSampler, rng: np.random.Generator) -> int:
    if s.kind == "fixed":
        return s.n
    if s.kind == "uniform":
        return int(rng.integers(s.lo, s.hi + 1))
    if s.kind == "empirical":
        return int(rng.choice(np.array(s.values), p=np.array(s.probs)))
    raise ValueError(f"unknown count sampler kind {s.kind!r}")


# ---------------------------------------------------------------------------
# Grid priors


def prior_to_grid(prior: SpatialPrior, extent: float, resolution: float) -> PriorGrid:
    """Discretize the lateral prior on a square grid and normalize to sum 1."""
    if extent <= 0 or resolution <= 0:
        raise ValueError("extent and resolution must be positive")
    n = int(round(2.0 * extent / resolution))
    centers = -extent + (np.arange(n) + 0.5) * resolution
    row = spatial_prior_density(centers)  # density along x2
    weights = np.tile(row[None, :], (n, 1)).astype(np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("degenerate prior: density is zero over the whole grid")
    return PriorGrid(weights=weights / total, extent=float(extent), resolution=float(resolution))


def target_prior_from_marginal(marginal) -> PriorGrid:
    """Turn an estimated label marginal into a sampling prior (normalize)."""
    freq = np.asarray(marginal.freq, dtype=np.float64)
    total = freq.sum()
    if total <= 0:
        raise ValueError("degenerate prior: marginal has zero mass")
    return PriorGrid(weights=freq / total, extent=marginal.spec.extent,
                     resolution=marginal.spec.resolution)


def blend(spec: BlendSpec) -> PriorGrid:
    """Cellwise alpha*a + (1-alpha)*b, renormalized against float drift."""
    if not spec.a.same_geometry(spec.b):
        raise ValueError("blend requires prior grids with identical geometry")
    w = spec.alpha * spec.a.weights + (1.0 - spec.alpha) * spec.b.weights
    return PriorGrid(weights=w / w.sum(), extent=spec.a.extent, resolution=spec.a.resolution)


def _gumbel_order(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices of positive-weight cells in weighted without-replacement order.

    Gumbel-top-k: sorting log(w) + Gumbel noise descending is equivalent to
    sequential weighted draws without replacement.
    """
    flat = weights.ravel()
    idx = np.flatnonzero(flat > 0)
    u = rng.random(idx.size)
    keys = np.log(flat[idx]) - np.log(-np.log(u))
    return idx[np.argsort(-keys, kind="stable")]


def _make_npc(x1: float, x2: float, yaw: float, asset_id: int, assets) -> NpcSpec:
    a = assets[asset_id]
    return NpcSpec(pose=Pose2(x1, x2, yaw), length=a.length, width=a.width,
                   asset_id=asset_id, color=a.color)


def sample_from_grid(grid: PriorGrid, n: int, rng: np.random.Generator,
                     map_spec: MapSpec, assets=None) -> list[NpcSpec]:
    """Draw up to n NPCs at grid cell centers with probability ~ cell weight.

    Cells are drawn without replacement; a placement rejected by collision
    consumes its cell but not the requested count. Yaw is uniform in
    [0, 2*pi), the asset uniform over the table.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    assets = world.asset_table() if assets is None else assets
    scene = Scene(map_id=map_spec.map_id)
    if n == 0:
        return scene.npcs
    order = _gumbel_order(grid.weights, rng)
    ncols = grid.weights.shape[1]
    centers = grid.cell_centers()
    for flat_ix in order:
        if len(scene.npcs) >= n:
            break
        i, j = divmod(int(flat_ix), ncols)
        yaw = rng.uniform(0.0, world.TWO_PI)
        asset_id = int(rng.integers(len(assets)))
        npc = _make_npc(float(centers[i]), float(centers[j]), yaw, asset_id, assets)
        world.try_place(scene, npc, grid.extent)
    return scene.npcs


def road_candidate_weights(dists: np.ndarray) -> np.ndarray:
    """Unnormalized selection weights: closer candidates exponentially favored."""
    return np.exp(-np.asarray(dists, dtype=float) / DISTANCE_WEIGHT_SCALE)


def road_structure_sample(map_spec: MapSpec, n: int, ego: Pose2,
                          rng: np.random.Generator, assets=None) -> list[NpcSpec]:
    """Place up to n NPCs on lane-aligned spawn candidates.

    Candidates within MIN_EGO_DISTANCE of the ego are excluded; the rest are
    ordered by a weighted draw without replacement (weight exp(-d/25)) and
    tried in order until n placements succeed or candidates run out. NPC yaw
    is the candidate's lane heading.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    assets = world.asset_table() if assets is None else assets
    cand = map_spec.candidates
    if cand.shape[0] == 0:
        raise ValueError("no valid spawn points: map has no candidates")
    dists = np.hypot(cand[:, 0] - ego.x1, cand[:, 1] - ego.x2)
    valid = np.flatnonzero(dists > MIN_EGO_DISTANCE)
    if valid.size == 0:
        raise ValueError("no valid spawn points beyond the ego exclusion radius")
    w = road_candidate_weights(dists[valid])
    u = rng.random(valid.size)
    keys = np.log(w) - np.log(-np.log(u))
    order = valid[np.argsort(-keys, kind="stable")]
    scene = Scene(map_id=map_spec.map_id)
    for ix in order:
        if len(scene.npcs) >= n:
            break
        x1, x2, yaw = cand[ix]
        asset_id = int(rng.integers(len(assets)))
        npc = _make_npc(float(x1), float(x2), float(yaw), asset_id, assets)
        world.try_place(scene, npc, map_spec.extent)
    return scene.npcs
