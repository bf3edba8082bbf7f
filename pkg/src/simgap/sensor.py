"""Domain-conditional rendering and strong augmentation.

A scene is turned into a top-down pseudo-camera image (3xHxW floats in [0,1])
aligned with the BEV grid. The sim and real domains differ only in
appearance: palette, background texture, pixel noise, and post-processing,
never in geometry, so labels stay identical across domains.

Strong augmentation is a small RandAugment-style pipeline restricted to
photometric and masking operations; it never moves pixels, so the label grid
of an augmented observation is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter

from .bev import GridSpec, footprint_window
from .world import MapSpec, Scene

AUGMENT_OPS = ("brightness", "contrast", "gaussian_noise", "cutout", "channel_drop")

#: Cutout magnitude -> target zeroed-area fraction bounds (linear in m/30).
#: Realized rectangles are sampled ~8% inside the bounds to absorb integer
#: rounding of the rectangle dimensions.
CUTOUT_AREA_TABLE = {m: (0.1 * m / 30.0, 0.4 * m / 30.0) for m in range(31)}

_WEATHER_BRIGHTNESS = 0.5  # brightness multiplier is 1 - this * weather
_WEATHER_FOG_ALPHA = 0.4   # fog blend weight at weather = 1
_FOG_GRAY = 0.5
_VIGNETTE_STRENGTH = 0.30
_GRAIN_AMPLITUDE = 0.03


@dataclass
class DomainRenderParams:
    """Rendering preset for one domain.

    `weather` and `postprocess_on` are the generation-time defaults used to
    fill per-scene NuisanceParams; at render time the scene's own nuisance
    values are authoritative for those two knobs plus palette truncation and
    extra pixel noise. `channel_order` models the sensor's color response
    (the real preset reads channels in reversed order).
    """

    domain: str = "sim"
    texture_noise_std: float = 0.0
    palette: np.ndarray = field(default_factory=lambda: _sim_palette())
    background_style: str = "flat"
    postprocess_on: bool = False
    weather: float = 0.0
    channel_order: tuple[int, int, int] = (0, 1, 2)

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.palette.ndim != 2 or self.palette.shape[1] != 3 or self.palette.shape[0] < 1:
            raise ValueError("palette must be a nonempty (K, 3) array")
        if self.texture_noise_std < 0:
            raise ValueError("texture_noise_std must be >= 0")
        if self.background_style not in ("flat", "textured"):
            raise ValueError(f"unknown background style {self.background_style!r}")
        if sorted(self.channel_order) != [0, 1, 2]:
            raise ValueError("channel_order must be a permutation of (0, 1, 2)")


def _base_palette(count: int = 64) -> np.ndarray:
    """One shared vehicle-color family for both domains.

    Colors are kept away from the background band so vehicles stay visible
    in either domain; the domains differ in how finely asset colors are
    quantized (palette size), not in the family itself.
    """
    rng = np.random.default_rng(np.random.SeedSequence(911))
    colors = []
    while len(colors) < count:
        c = rng.uniform(0.05, 0.95, size=3)
        c = 0.75 * c + 0.25 * c.mean()
        if abs(float(c.mean()) - 0.30) > 0.10:  # contrast with the backdrop
            colors.append(c)
    return np.asarray(colors)


def _sim_palette() -> np.ndarray:
    return _base_palette()[:8]


def _real_palette() -> np.ndarray:
    # same family seen through a different camera response: contrast is
    # compressed and brightness lifted
    return np.clip(0.72 * _base_palette() + 0.14, 0.0, 1.0)


def sim_preset() -> DomainRenderParams:
    """Clean simulator look: flat background, saturated 8-color palette.

    A little sensor noise keeps the sim and real pixel statistics on
    overlapping supports; a noise-free domain would be separable by a single
    high-pass statistic and no representation could bridge it.
    """
    return DomainRenderParams(domain="sim", texture_noise_std=0.012, palette=_sim_palette(),
                              background_style="flat", postprocess_on=False, weather=0.0)


def real_preset() -> DomainRenderParams:
    """Real-world stand-in: textured background, 64 muted colors, noise, postprocessing.

    Background means stay close to the sim preset on purpose: the gap lives
    in texture, color diversity, noise, and postprocessing, not in gross
    image statistics, so the joint task remains solvable in both domains.
    """
    return DomainRenderParams(domain="real", texture_noise_std=0.05, palette=_real_palette(),
                              background_style="textured", postprocess_on=True, weather=0.2,
                              channel_order=(2, 1, 0))


def _smooth_field(rng: np.random.Generator, n: int, scale_cells: int) -> np.ndarray:
    """Zero-mean smooth random field in roughly [-1, 1]."""
    raw = rng.standard_normal((n, n))
    sm = uniform_filter(raw, size=max(3, scale_cells), mode="wrap")
    amp = np.abs(sm).max()
    return sm / amp if amp > 0 else sm


def render(scene: Scene, map_spec: MapSpec, grid: GridSpec,
           params: DomainRenderParams, rng: np.random.Generator) -> np.ndarray:
    """Render a scene to a (3, H, W) float32 image in [0, 1].

    Deterministic given the rng state. The flat style is a uniform backdrop;
    the textured style shows the map's road under a smooth random texture.
    NPC rectangles are painted with palette-quantized asset colors at exactly
    the cells their footprint covers, identically in both styles.
    """
    n = grid.size
    img = np.empty((3, n, n), dtype=np.float64)

    centers = grid.cell_centers()
    X1, X2 = np.meshgrid(centers, centers, indexing="ij")
    road = map_spec.drivable_at(X1.ravel(), X2.ravel()).reshape(n, n)

    if params.background_style == "flat":
        img[:] = 0.30
    else:
        # keep means near the flat preset; the gap is structure, not brightness
        amp = rng.uniform(0.03, 0.10)
        tex = _smooth_field(rng, n, max(2, n // 12))
        base = 0.36 + amp * tex
        img[:] = base[None, :, :]
        img[0] *= 1.05  # slight warm tint off-road
        road_tex = 0.24 + 0.04 * _smooth_field(rng, n, max(2, n // 20))
        for c in range(3):
            img[c, road] = road_tex[road]

    palette = params.palette[: max(1, scene.nuisance.palette_size)]
    for npc in scene.npcs:
        win = footprint_window(grid, npc.pose.x1, npc.pose.x2, npc.pose.yaw,
                               npc.length, npc.width)
        if win is None:
            continue
        si, sj, mask = win
        color = _quantize_color(np.asarray(npc.color), palette)
        for c in range(3):
            img[c, si, sj][mask] = color[c]

    weather = scene.nuisance.weather
    if weather > 0:
        img *= 1.0 - _WEATHER_BRIGHTNESS * weather
        a = _WEATHER_FOG_ALPHA * weather
        img = (1.0 - a) * img + a * _FOG_GRAY

    noise_std = params.texture_noise_std + scene.nuisance.noise_std
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, size=img.shape)

    if params.postprocess_on or scene.nuisance.postprocess_on:
        r = np.hypot(X1 / grid.extent, X2 / grid.extent) / np.sqrt(2.0)
        img *= 1.0 - _VIGNETTE_STRENGTH * (r * r)[None, :, :]
        img += rng.uniform(-_GRAIN_AMPLITUDE, _GRAIN_AMPLITUDE, size=(1, n, n))

    if params.channel_order != (0, 1, 2):
        img = img[list(params.channel_order)]

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _quantize_color(color: np.ndarray, palette: np.ndarray) -> np.ndarray:
    d = ((palette - color[None, :]) ** 2).sum(axis=1)
    return palette[int(np.argmin(d))]


# ---------------------------------------------------------------------------
# Strong augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """RandAugment-style policy: n_ops draws from a photometric op pool."""

    n_ops: int = 2
    magnitude: int = 10
    pool: tuple[str, ...] = AUGMENT_OPS

    def __post_init__(self):
        if not (0 <= self.magnitude <= 30):
            raise ValueError("magnitude must be in [0, 30]")
        if self.n_ops > len(self.pool):
            raise ValueError("n_ops cannot exceed the pool size")
        unknown = set(self.pool) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")


def strong_augment(obs: np.ndarray, policy: AugmentPolicy,
                   rng: np.random.Generator) -> np.ndarray:
    """Apply n_ops randomly chosen photometric ops; output clipped to [0,1].

    No operation moves pixels, so labels remain aligned with the input.
    """
    img = np.asarray(obs, dtype=np.float32).copy()
    if policy.n_ops == 0:
        return img
    m = policy.magnitude / 30.0
    ops = rng.choice(len(policy.pool), size=policy.n_ops, replace=False)
    for k in ops:
        op = policy.pool[int(k)]
        if op == "brightness":
            img *= 1.0 + rng.uniform(-1.0, 1.0) * 0.8 * m
        elif op == "contrast":
            mu = img.mean()
            img = mu + (img - mu) * (1.0 + rng.uniform(-1.0, 1.0) * 0.8 * m)
        elif op == "gaussian_noise":
            if m > 0:
                img += rng.normal(0.0, 0.3 * m, size=img.shape).astype(np.float32)
        elif op == "cutout":
            _cutout(img, policy.magnitude, rng)
        elif op == "channel_drop":
            c = int(rng.integers(img.shape[0]))
            img[c] *= 1.0 - m
    return np.clip(img, 0.0, 1.0, out=img)


def _cutout(img: np.ndarray, magnitude: int, rng: np.random.Generator) -> None:
    lo, hi = CUTOUT_AREA_TABLE[magnitude]
    if hi <= 0:
        return
    h, w = img.shape[1], img.shape[2]
    # stay inside the documented bounds after integer rounding
    frac = rng.uniform(lo + 0.08 * (hi - lo), hi - 0.07 * (hi - lo))
    area = frac * h * w
    aspect = rng.uniform(0.6, 1.6)
    rh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    rw = min(w, max(1, int(round(area / rh))))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    img[:, top:top + rh, left:left + rw] = 0.0
