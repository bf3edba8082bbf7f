"""BEV labels and distribution diagnostics.

Rasterization of scenes into binary occupancy grids, per-cell label marginals
over datasets, Jensen-Shannon divergence between marginals, the joint-risk
lower bound computed from label/representation divergences, and IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .world import Scene

LN2 = math.log(2.0)


@dataclass(frozen=True)
class GridSpec:
    """Square BEV grid: symmetric extent (half-width, meters) and cell size.

    Cells are indexed [i, j] with i along x1 (rows) and j along x2 (cols);
    cell (i, j) is centered at (-extent + (i+.5)*res, -extent + (j+.5)*res).
    """

    extent: float = 50.0
    resolution: float = 0.5

    def __post_init__(self):
        if self.extent <= 0 or self.resolution <= 0:
            raise ValueError("extent and resolution must be positive")
        n = 2.0 * self.extent / self.resolution
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("2*extent/resolution must be a positive integer")

    @property
    def size(self) -> int:
        return int(round(2.0 * self.extent / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        n = self.size
        return (n, n)

    def cell_centers(self) -> np.ndarray:
        return -self.extent + (np.arange(self.size) + 0.5) * self.resolution


@dataclass
class LabelGrid:
    """Binary occupancy over a GridSpec (uint8 in {0, 1})."""

    cells: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.shape != self.spec.shape:
            raise ValueError("label shape does not match grid spec")


@dataclass
class MarginalMap:
    """Per-cell positive frequency over a dataset of label grids."""

    freq: np.ndarray
    count: int
    spec: GridSpec

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=np.float64)
        if ((self.freq < 0) | (self.freq > 1)).any():
            raise ValueError("marginal frequencies must lie in [0,1]")


def footprint_window(spec: GridSpec, x1: float, x2: float, yaw: float,
                     length: float, width: float):
    """Cells whose centers fall inside one oriented rectangle.

    Returns (i_slice, j_slice, mask) limited to the rectangle's bounding box,
    or None if the box misses the grid entirely. Membership is a center-point
    test with inclusive boundaries.
    """
    n = spec.size
    half_diag = 0.5 * math.hypot(length, width)
    lo_i = int(math.floor((x1 - half_diag + spec.extent) / spec.resolution))
    hi_i = int(math.ceil((x1 + half_diag + spec.extent) / spec.resolution))
    lo_j = int(math.floor((x2 - half_diag + spec.extent) / spec.resolution))
    hi_j = int(math.ceil((x2 + half_diag + spec.extent) / spec.resolution))
    lo_i, hi_i = max(lo_i, 0), min(hi_i, n)
    lo_j, hi_j = max(lo_j, 0), min(hi_j, n)
    if lo_i >= hi_i or lo_j >= hi_j:
        return None
    centers = spec.cell_centers()
    cx = centers[lo_i:hi_i]
    cy = centers[lo_j:hi_j]
    dx = cx[:, None] - x1
    dy = cy[None, :] - x2
    c, s = math.cos(yaw), math.sin(yaw)
    local_l = dx * c + dy * s
    local_w = -dx * s + dy * c
    mask = (np.abs(local_l) <= length / 2.0) & (np.abs(local_w) <= width / 2.0)
    return slice(lo_i, hi_i), slice(lo_j, hi_j), mask


def rasterize(scene: Scene, spec: GridSpec) -> LabelGrid:
    """Mark every cell whose center lies inside any NPC rectangle."""
    cells = np.zeros(spec.shape, dtype=np.uint8)
    for npc in scene.npcs:
        win = footprint_window(spec, npc.pose.x1, npc.pose.x2, npc.pose.yaw,
                               npc.length, npc.width)
        if win is None:
            continue
        si, sj, mask = win
        cells[si, sj] |= mask
    return LabelGrid(cells=cells, spec=spec)


def estimate_marginal(labels: list[LabelGrid]) -> MarginalMap:
    """Per-cell mean occupancy over a nonempty list of label grids.

    Accumulates in integers, so the result is exactly permutation-invariant.
    """
    if not labels:
        raise ValueError("cannot estimate a marginal from an empty list")
    spec = labels[0].spec
    total = np.zeros(spec.shape, dtype=np.int64)
    for lab in labels:
        if lab.spec != spec:
            raise ValueError("all label grids must share one grid spec")
        total += lab.cells
    return MarginalMap(freq=total / float(len(labels)), count=len(labels), spec=spec)


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def jsd(p: MarginalMap, q: MarginalMap, mode: str = "categorical") -> float:
    """Jensen-Shannon divergence between two marginals, in nats.

    "categorical" (default) normalizes each frequency map into a spatial
    distribution over cells and compares those. "bernoulli" instead averages
    the per-cell JSD between Bernoulli(p_ij) and Bernoulli(q_ij).
    """
    if p.spec != q.spec:
        raise ValueError("marginals must share one grid spec")
    if mode == "categorical":
        tp, tq = p.freq.sum(), q.freq.sum()
        if tp <= 0 or tq <= 0:
            raise ValueError("degenerate marginal: zero total mass")
        a = (p.freq / tp).ravel()
        b = (q.freq / tq).ravel()
        m = 0.5 * (a + b)
        # KL(a||m) + KL(b||m) via sum x log x terms; m > 0 wherever a or b is
        kl_a = float((_xlogx(a) - np.where(a > 0, a * np.log(np.where(m > 0, m, 1.0)), 0.0)).sum())
        kl_b = float((_xlogx(b) - np.where(b > 0, b * np.log(np.where(m > 0, m, 1.0)), 0.0)).sum())
        return 0.5 * kl_a + 0.5 * kl_b
    if mode == "bernoulli":
        a, b = p.freq.ravel(), q.freq.ravel()
        m = 0.5 * (a + b)
        terms = (
            0.5 * (_xlogx(a) + _xlogx(1.0 - a)) + 0.5 * (_xlogx(b) + _xlogx(1.0 - b))
            - (_xlogx(m) + _xlogx(1.0 - m))
        )
        return float(terms.mean())
    raise ValueError(f"unknown jsd mode {mode!r}")


@dataclass(frozen=True)
class BoundResult:
    """Joint-risk lower bound, or a premise-not-met marker."""

    premise_met: bool
    value: Optional[float]


def thm2_lower_bound(jsd_y: float, jsd_z: float) -> BoundResult:
    """Lower bound 0.5*(sqrt(jsd_y) - sqrt(jsd_z))^2 on the joint risk.

    Requires jsd_y >= jsd_z >= 0 (label divergence at least the
    representation divergence); otherwise returns premise_met=False.
    Intermediates run in extended precision so the result is the correctly
    rounded value of the formula.
    """
    if not (jsd_y >= jsd_z >= 0.0):
        return BoundResult(premise_met=False, value=None)
    a = np.sqrt(np.longdouble(jsd_y))
    b = np.sqrt(np.longdouble(jsd_z))
    return BoundResult(premise_met=True, value=float(0.5 * (a - b) * (a - b)))


def iou(pred: np.ndarray, label: LabelGrid, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded prediction vs binary label.

    Defined as 1.0 when both sets are empty.
    """
    pred = np.asarray(pred)
    if pred.shape != label.cells.shape:
        raise ValueError(f"pred shape {pred.shape} does not match label {label.cells.shape}")
    pb = pred >= threshold
    lb = label.cells.astype(bool)
    union = np.logical_or(pb, lb).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(pb, lb).sum()
    return float(inter / union)
