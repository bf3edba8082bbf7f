"""SGD with Nesterov momentum and polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor


class DivergedError(RuntimeError):
    """Raised when a gradient goes non-finite."""


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.70
    clip_norm: float | None = 5.0  # global L2 clip; None disables

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


class SgdNesterov:
    """Nesterov-momentum SGD: v <- mu*v + g; p <- p - lr*(g + mu*v).

    Gradient clipping is applied per group when `clip_groups` maps parameter
    names to group labels (so an exploding adversarial head cannot starve the
    task branches of their clip budget); otherwise one global norm is used.
    """

    def __init__(self, params: list[tuple[str, Tensor]], config: OptimizerConfig,
                 clip_groups: dict[str, str] | None = None):
        self.config = config
        self.params = list(params)
        self.clip_groups = clip_groups
        self.velocities: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params
        }

    def lr_at(self, epoch_fraction: float) -> float:
        """lr0 * (1 - epoch/total)^power, clamped at the final epoch."""
        frac = min(max(epoch_fraction, 0.0), 1.0)
        return self.config.lr * (1.0 - frac) ** self.config.poly_power

    def _group_of(self, name: str) -> str:
        if self.clip_groups is None:
            return "all"
        return self.clip_groups.get(name, "all")

    def step(self, epoch_fraction: float) -> float:
        """Apply one update from the accumulated gradients; returns the lr used."""
        lr = self.lr_at(epoch_fraction)
        mu = self.config.momentum
        scales: dict[str, float] = {}
        if self.config.clip_norm is not None:
            sq: dict[str, float] = {}
            for name, p in self.params:
                if p.grad is None:
                    continue
                if not np.isfinite(p.grad).all():
                    raise DivergedError(f"diverged: non-finite gradient in {name}")
                key = self._group_of(name)
                sq[key] = sq.get(key, 0.0) + float((p.grad.astype(np.float64) ** 2).sum())
            for key, s in sq.items():
                norm = np.sqrt(s)
                scales[key] = self.config.clip_norm / norm if norm > self.config.clip_norm else 1.0
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergedError(f"diverged: non-finite gradient in {name}")
            scale = scales.get(self._group_of(name), 1.0)
            if scale != 1.0:
                g = g * scale
            v = self.velocities[name]
            v *= mu
            v += g
            p.data -= (lr * (g + mu * v)).astype(p.data.dtype)
        return lr

    def load_velocities(self, velocities: dict[str, np.ndarray]):
        for name in self.velocities:
            if name in velocities:
                self.velocities[name] = velocities[name].astype(
                    self.velocities[name].dtype).copy()
