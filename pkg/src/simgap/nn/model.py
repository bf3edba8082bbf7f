"""The adaptation network: shared encoder, segmentation head, domain critic.

The encoder downsamples the observation to a latent map at 1/8 the grid
resolution; the segmentation head predicts per-cell occupancy and upsamples
back; the critic scores each latent location for domain membership and is
attached through the gradient reversal node so one backward pass serves the
minimax objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = "simgap-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GrlSchedule:
    """Warm-up of the reversal strength: logistic ramp to lambda_max."""

    lambda_max: float = 0.78
    warmup_iters: int = 570

    def value(self, t: int) -> float:
        if self.warmup_iters <= 0:
            return self.lambda_max
        p = min(float(t) / float(self.warmup_iters), 1.0)
        return self.lambda_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale; all recorded in checkpoints)."""

    in_channels: int = 3
    grid_size: int = 64
    widths: tuple[int, int, int, int] = (32, 64, 128, 128)
    head_mid: int = 32
    critic_mid: int = 32
    leaky_slope: float = 0.1
    kernel: int = 3

    @property
    def latent_stride(self) -> int:
        return 8

    @property
    def latent_size(self) -> int:
        if self.grid_size % self.latent_stride != 0:
            raise ValueError("grid_size must be divisible by 8")
        return self.grid_size // self.latent_stride


def _he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class AdaptModel:
    """Encoder g, segmentation head, and per-location critic over one latent."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        k = config.kernel
        w1, w2, w3, w4 = config.widths
        plan = [
            # name, (out_c, in_c), stride
            ("enc1", (w1, config.in_channels), 2),
            ("enc2", (w2, w1), 2),
            ("enc3", (w3, w2), 2),
            ("enc4", (w4, w3), 1),
            ("head1", (config.head_mid, w4), 1),
            ("head2", (1, config.head_mid), 1),
            ("critic1", (config.critic_mid, w4), 1),
            ("critic2", (1, config.critic_mid), 1),
        ]
        self._strides = {name: s for name, _, s in plan}
        self.params: dict[str, Tensor] = {}
        for name, (oc, ic), _ in plan:
            wt = _he_init(rng, (oc, ic, k, k), fan_in=ic * k * k)
            self.params[f"{name}.w"] = Tensor(wt, requires_grad=True, name=f"{name}.w")
            self.params[f"{name}.b"] = Tensor(np.zeros(oc, dtype=np.float32),
                                              requires_grad=True, name=f"{name}.b")

    # -- forward pieces ----------------------------------------------------

    def _conv(self, x: Tensor, name: str, activate: bool = True) -> Tensor:
        pad = self.config.kernel // 2
        out = ag.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                        stride=self._strides[name], padding=pad)
        if activate:
            out = ag.leaky_relu(out, self.config.leaky_slope)
        return out

    def encode(self, x) -> Tensor:
        z = x if isinstance(x, Tensor) else Tensor(x)
        for name in ("enc1", "enc2", "enc3", "enc4"):
            z = self._conv(z, name)
        return z

    def seg_head(self, z: Tensor) -> Tensor:
        h = self._conv(z, "head1")
        h = self._conv(h, "head2", activate=False)
        h = ag.nearest_upsample(h, self.config.latent_stride)
        return ag.sigmoid(h)

    def critic_head(self, z: Tensor, lam: float) -> Tensor:
        u = ag.grl(z, lam)
        u = self._conv(u, "critic1")
        return self._conv(u, "critic2", activate=False)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Segmentation probabilities without building a graph, (B, H, W)."""
        with ag.no_grad():
            p = self.seg_head(self.encode(x))
        return p.data[:, 0]

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names by subnetwork (encoder / head / critic)."""
        groups: dict[str, list[str]] = {"encoder": [], "head": [], "critic": []}
        for name in self.params:
            if name.startswith("enc"):
                groups["encoder"].append(name)
            elif name.startswith("head"):
                groups["head"].append(name)
            else:
                groups["critic"].append(name)
        return groups

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes()
                        for _, p in sorted(self.params.items()))

    def load_state_blob(self, blob: bytes):
        offset = 0
        for _, p in sorted(self.params.items()):
            n = p.data.size
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            p.data = arr.reshape(p.data.shape).copy()
            offset += 4 * n
        if offset != len(blob):
            raise ValueError("parameter blob size does not match the architecture")

    def clone(self) -> "AdaptModel":
        other = AdaptModel(self.config)
        other.load_state_blob(self.state_blob())
        return other


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + little-endian float32 blobs.


def save_checkpoint(path, model: AdaptModel, *, iteration: int = 0,
                    schedule: GrlSchedule | None = None,
                    extra: dict | None = None,
                    velocities: dict[str, np.ndarray] | None = None) -> None:
    cfg = model.config
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "architecture": {
            "in_channels": cfg.in_channels,
            "grid_size": cfg.grid_size,
            "widths": list(cfg.widths),
            "head_mid": cfg.head_mid,
            "critic_mid": cfg.critic_mid,
            "leaky_slope": cfg.leaky_slope,
            "kernel": cfg.kernel,
        },
        "schedule": None if schedule is None else {
            "lambda_max": schedule.lambda_max,
            "warmup_iters": schedule.warmup_iters,
        },
        "has_velocities": velocities is not None,
        "extra": extra or {},
    }
    blob = model.state_blob()
    vblob = b""
    if velocities is not None:
        vblob = b"".join(np.ascontiguousarray(velocities[name], dtype="<f4").tobytes()
                         for name in sorted(velocities))
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        f.write(blob)
        f.write(vblob)


def load_checkpoint(path):
    """Returns (model, header, velocities-or-None)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        rest = f.read()
    header = json.loads(header_line.decode())
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError("not a simgap checkpoint")
    arch = header["architecture"]
    cfg = ModelConfig(in_channels=arch["in_channels"], grid_size=arch["grid_size"],
                      widths=tuple(arch["widths"]), head_mid=arch["head_mid"],
                      critic_mid=arch["critic_mid"], leaky_slope=arch["leaky_slope"],
                      kernel=arch["kernel"])
    model = AdaptModel(cfg)
    nbytes = sum(4 * p.data.size for p in model.params.values())
    model.load_state_blob(rest[:nbytes])
    velocities = None
    if header.get("has_velocities"):
        velocities = {}
        offset = nbytes
        for name, p in sorted(model.params.items()):
            n = p.data.size
            velocities[name] = np.frombuffer(rest, dtype="<f4", count=n,
                                             offset=offset).reshape(p.data.shape).copy()
            offset += 4 * n
    return model, header, velocities
