"""Training strategies: weighted BCE, per-location adversarial discrepancies,
pseudo-labels, and the training/evaluation loops.

The minimax objective is trained in a single forward-backward pass: the
critic term enters the minimized total as -lambda_dst * d_st, so plain
gradient descent makes the critic ascend the discrepancy estimate while the
gradient reversal node hands the encoder the descent direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import bev, sensor
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.model import AdaptModel, GrlSchedule, ModelConfig, load_checkpoint, save_checkpoint
from .nn.optim import DivergedError, OptimizerConfig, SgdNesterov

LN2 = math.log(2.0)
PRED_EPS = 1e-7

STRATEGIES = (
    "no_adapt",
    "dann",
    "fdal_jensen",
    "fdal_pearson",
    "fdal_pearson_pseudo",
    "pseudo_only",
)
_ADVERSARIAL = {"dann": "dann", "fdal_jensen": "jensen",
                "fdal_pearson": "pearson", "fdal_pearson_pseudo": "pearson"}
_USES_PSEUDO = {"fdal_pearson_pseudo", "pseudo_only"}


@dataclass(frozen=True)
class LossWeights:
    """Loss coefficients: positive-pixel weight, discrepancy and pseudo scales,
    and the pseudo-label confidence threshold."""

    beta: float = 2.13
    lambda_dst: float = 1.87
    mu_pseudo: float = 1.0
    tau: float = 0.9

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not (0.5 < self.tau < 1.0):
            raise ValueError("tau must be in (0.5, 1)")


# ---------------------------------------------------------------------------
# Losses


def seg_loss(pred, label, beta: float) -> Tensor:
    """Positive-weighted binary cross entropy, averaged over all pixels."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float32))
    y = np.asarray(label, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ValueError(f"seg_loss: label shape {y.shape} != pred shape {pred.shape}")
    p = ag.clip(pred, PRED_EPS, 1.0 - PRED_EPS, passthrough=True)
    terms = ag.add(ag.mul(ag.log(p), beta * y), ag.mul(ag.log(1.0 - p), 1.0 - y))
    return ag.mul(ag.tmean(terms), -1.0)


def pearson_dst(critic_src, critic_tgt) -> Tensor:
    """mean_s[u] - mean_t[u^2/4 + u]; the critic's divergence estimate."""
    us = critic_src if isinstance(critic_src, Tensor) else Tensor(np.asarray(critic_src, np.float32))
    ut = critic_tgt if isinstance(critic_tgt, Tensor) else Tensor(np.asarray(critic_tgt, np.float32))
    conj = ag.add(ag.mul(ag.square(ut), 0.25), ut)
    return ag.add(ag.tmean(us), ag.mul(ag.tmean(conj), -1.0))


def dann_dst(critic_src, critic_tgt) -> Tensor:
    """Negative logistic domain-classification loss (source=1, target=0)."""
    us = critic_src if isinstance(critic_src, Tensor) else Tensor(np.asarray(critic_src, np.float32))
    ut = critic_tgt if isinstance(critic_tgt, Tensor) else Tensor(np.asarray(critic_tgt, np.float32))
    # -log sigmoid(u) = softplus(-u); -log(1 - sigmoid(u)) = softplus(u)
    bce = ag.add(ag.tmean(ag.softplus(ag.mul(us, -1.0))), ag.tmean(ag.softplus(ut)))
    return ag.mul(bce, -0.5)


def jensen_dst(critic_src, critic_tgt) -> Tensor:
    """Jensen-Shannon discrepancy with the bounded activation log2 - softplus(-u).

    The conjugate term reduces to softplus(u) - log2, which keeps every
    evaluation finite for any real critic output.
    """
    us = critic_src if isinstance(critic_src, Tensor) else Tensor(np.asarray(critic_src, np.float32))
    ut = critic_tgt if isinstance(critic_tgt, Tensor) else Tensor(np.asarray(critic_tgt, np.float32))
    act = ag.add(ag.mul(ag.tmean(ag.softplus(ag.mul(us, -1.0))), -1.0), LN2)
    conj = ag.add(ag.tmean(ag.softplus(ut)), -LN2)
    return ag.add(act, ag.mul(conj, -1.0))


_DST_FNS = {"pearson": pearson_dst, "dann": dann_dst, "jensen": jensen_dst}


def pseudo_loss(p_clean: np.ndarray, p_aug, tau: float, beta: float) -> Tensor:
    """Confidence-masked BCE against the strongly augmented prediction.

    `p_clean` is a constant (no gradient flows through it); pixels with
    p >= tau are confident positives, p <= 1 - tau confident negatives. The
    sum is divided by the confident-pixel count; no confident pixels gives 0.
    """
    p_clean = np.asarray(p_clean)
    pa = p_aug if isinstance(p_aug, Tensor) else Tensor(np.asarray(p_aug, np.float32))
    if p_clean.shape != pa.shape:
        raise ValueError(f"pseudo_loss: shapes {p_clean.shape} vs {pa.shape}")
    pos = (p_clean >= tau).astype(pa.dtype)
    neg = (p_clean <= 1.0 - tau).astype(pa.dtype)
    count = float(pos.sum() + neg.sum())
    if count == 0:
        return Tensor(np.asarray(0.0, dtype=pa.dtype))
    p = ag.clip(pa, PRED_EPS, 1.0 - PRED_EPS, passthrough=True)
    s = ag.add(ag.tsum(ag.mul(ag.log(p), beta * pos)), ag.tsum(ag.mul(ag.log(1.0 - p), neg)))
    return ag.mul(s, -1.0 / count)


def confident_fraction(p_clean: np.ndarray, tau: float) -> float:
    p = np.asarray(p_clean)
    return float(((p >= tau) | (p <= 1.0 - tau)).mean())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainSettings:
    strategy: str = "fdal_pearson_pseudo"
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: GrlSchedule = field(default_factory=GrlSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 35
    batch_source: int = 4
    batch_target: int = 4
    target_label_fraction: float = 0.0
    augment: sensor.AugmentPolicy = field(default_factory=sensor.AugmentPolicy)
    seed: int = 0
    eval_every: int = 1
    eval_batch: int = 64
    # L2 penalty on the latent entering the critic. Without normalization
    # layers the encoder can drive the conjugate term to -inf by inflating
    # feature scale instead of aligning domains; this caps that exploit and
    # is inert at equilibrium. Only active for adversarial strategies.
    latent_l2: float = 0.005

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.epochs < 1 or self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if not (0.0 <= self.target_label_fraction <= 1.0):
            raise ValueError("target_label_fraction must be in [0,1]")


@dataclass
class TrainResult:
    model: AdaptModel
    metrics: list[dict]
    epoch_evals: list[tuple[int, float]]
    final_iou: float | None
    diverged: bool = False


METRIC_COLUMNS = ("iter", "seg_loss", "d_st", "pseudo_loss", "lambda_t", "confident_frac", "lr")


def _iter_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3, iteration)))


def _clip_groups(model: AdaptModel) -> dict[str, str]:
    return {name: group for group, names in model.parameter_groups().items()
            for name in names}


def _labeled_target_indices(n_target: int, fraction: float, seed: int) -> np.ndarray:
    if fraction <= 0:
        return np.zeros(0, dtype=np.int64)
    k = int(round(fraction * n_target))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    return np.sort(rng.permutation(n_target)[:k])


def train(model_config: ModelConfig, src_dataset, tgt_dataset, settings: TrainSettings,
          eval_dataset=None, checkpoint_path=None, checkpoint_every: int = 0,
          resume_from=None) -> TrainResult:
    """Run the selected strategy; returns the model plus per-iteration metrics.

    Everything is a pure function of (settings.seed, datasets, iteration), so
    resuming from a checkpoint reproduces the uninterrupted run exactly.
    """
    w = settings.weights
    src_obs, src_lab = src_dataset.observations, src_dataset.labels
    tgt_obs, tgt_lab = tgt_dataset.observations, tgt_dataset.labels
    n_src, n_tgt = len(src_obs), len(tgt_obs)
    if n_src == 0 or n_tgt == 0:
        raise ValueError("datasets must be nonempty")

    iters_per_epoch = (n_src + settings.batch_source - 1) // settings.batch_source
    total_iters = settings.epochs * iters_per_epoch
    adversarial = _ADVERSARIAL.get(settings.strategy)
    use_pseudo = settings.strategy in _USES_PSEUDO
    labeled_tgt = _labeled_target_indices(n_tgt, settings.target_label_fraction, settings.seed)
    labeled_mask = np.zeros(n_tgt, dtype=bool)
    labeled_mask[labeled_tgt] = True

    start_iter = 0
    if resume_from is not None:
        model, header, velocities = load_checkpoint(resume_from)
        start_iter = int(header["iteration"])
        optimizer = SgdNesterov(model.named_parameters(), settings.optimizer,
                                clip_groups=_clip_groups(model))
        if velocities:
            optimizer.load_velocities(velocities)
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence(entropy=settings.seed, spawn_key=(1,)))
        model = AdaptModel(model_config, init_rng)
        optimizer = SgdNesterov(model.named_parameters(), settings.optimizer,
                                clip_groups=_clip_groups(model))

    metrics: list[dict] = []
    epoch_evals: list[tuple[int, float]] = []
    last_good = (model.state_blob(), {k: v.copy() for k, v in optimizer.velocities.items()})

    for it in range(start_iter, total_iters):
        epoch = it // iters_per_epoch
        rng = _iter_rng(settings.seed, it)
        lam = settings.schedule.value(it)

        src_idx = rng.integers(0, n_src, size=settings.batch_source)
        tgt_idx = rng.integers(0, n_tgt, size=settings.batch_target)

        xs = Tensor(src_obs[src_idx])
        ys = src_lab[src_idx][:, None].astype(np.float32)
        zs = model.encode(xs)
        ps = model.seg_head(zs)
        loss_seg = seg_loss(ps, ys, w.beta)

        zt = None
        if adversarial or use_pseudo:
            zt = model.encode(Tensor(tgt_obs[tgt_idx]))

        if settings.target_label_fraction > 0 and labeled_mask[tgt_idx].any():
            sel = np.flatnonzero(labeled_mask[tgt_idx])
            pt_lab = model.seg_head(model.encode(Tensor(tgt_obs[tgt_idx[sel]])))
            yt = tgt_lab[tgt_idx[sel]][:, None].astype(np.float32)
            loss_seg = ag.add(loss_seg, seg_loss(pt_lab, yt, w.beta))

        total = loss_seg
        d_val = 0.0
        if adversarial:
            us = model.critic_head(zs, lam)
            ut = model.critic_head(zt, lam)
            d = _DST_FNS[adversarial](us, ut)
            d_val = d.item()
            # critic maximizes d; the GRL hands the encoder the reversed signal
            total = ag.add(total, ag.mul(d, -w.lambda_dst))
            if settings.latent_l2 > 0:
                scale_pen = ag.add(ag.tmean(ag.square(zs)), ag.tmean(ag.square(zt)))
                total = ag.add(total, ag.mul(scale_pen, settings.latent_l2))

        ps_val = 0.0
        frac = 0.0
        if use_pseudo:
            with ag.no_grad():
                p_clean = model.seg_head(zt).data
            frac = confident_fraction(p_clean, w.tau)
            aug = np.stack([
                sensor.strong_augment(tgt_obs[tgt_idx[b]], settings.augment, rng)
                for b in range(settings.batch_target)
            ])
            p_aug = model.seg_head(model.encode(Tensor(aug)))
            lp = pseudo_loss(p_clean, p_aug, w.tau, w.beta)
            ps_val = lp.item()
            total = ag.add(total, ag.mul(lp, w.mu_pseudo))

        if not np.isfinite(total.item()):
            model.load_state_blob(last_good[0])
            optimizer.load_velocities(last_good[1])
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, iteration=it,
                                schedule=settings.schedule,
                                velocities=optimizer.velocities,
                                extra={"diverged_at": it})
            raise DivergedError(f"diverged: non-finite loss at iteration {it}")

        model.zero_grad()
        total.backward()
        lr = optimizer.step(epoch / settings.epochs)
        last_good = (model.state_blob(), {k: v.copy() for k, v in optimizer.velocities.items()})

        metrics.append({
            "iter": it,
            "seg_loss": float(loss_seg.item()),
            "d_st": float(d_val),
            "pseudo_loss": float(ps_val),
            "lambda_t": float(lam),
            "confident_frac": float(frac),
            "lr": float(lr),
        })

        end_of_epoch = (it + 1) % iters_per_epoch == 0
        if end_of_epoch and eval_dataset is not None and settings.eval_every > 0 \
                and (epoch + 1) % settings.eval_every == 0:
            mean_iou, _ = evaluate(model, eval_dataset, batch=settings.eval_batch)
            epoch_evals.append((epoch, mean_iou))
        if checkpoint_path is not None and checkpoint_every > 0 and (it + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, iteration=it + 1,
                            schedule=settings.schedule,
                            velocities=optimizer.velocities)

    final_iou = None
    if eval_dataset is not None:
        final_iou, _ = evaluate(model, eval_dataset, batch=settings.eval_batch)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, iteration=total_iters,
                        schedule=settings.schedule, velocities=optimizer.velocities,
                        extra={"final": True})
    return TrainResult(model=model, metrics=metrics, epoch_evals=epoch_evals,
                       final_iou=final_iou)


def evaluate(model: AdaptModel, dataset, threshold: float = 0.5,
             batch: int = 64) -> tuple[float, list[float]]:
    """Mean and per-scene IoU of thresholded predictions on a labeled dataset."""
    obs, labels = dataset.observations, dataset.labels
    if len(obs) == 0:
        raise ValueError("evaluate: dataset is empty")
    grid = dataset.grid
    per_scene: list[float] = []
    for lo in range(0, len(obs), batch):
        preds = model.predict(obs[lo:lo + batch])
        for k in range(preds.shape[0]):
            lab = bev.LabelGrid(cells=labels[lo + k], spec=grid)
            per_scene.append(bev.iou(preds[k], lab, threshold))
    return float(np.mean(per_scene)), per_scene


def estimate_discrepancy(model: AdaptModel, src_dataset, tgt_dataset,
                         batch: int = 32, refine_steps: int = 0,
                         refine_lr: float = 0.01, seed: int = 0) -> float:
    """Critic-based Pearson discrepancy on held-out data (a sup lower estimate).

    With refine_steps > 0 the critic alone is first fine-tuned to ascend the
    estimate (a tighter member of the sup class); encoder and head stay fixed.
    """
    if refine_steps > 0:
        model = model.clone()
        critic_names = set(model.parameter_groups()["critic"])
        params = [(n, p) for n, p in model.named_parameters() if n in critic_names]
        opt = SgdNesterov(params, OptimizerConfig(lr=refine_lr, momentum=0.9, poly_power=0.0))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
        n_src, n_tgt = len(src_dataset.observations), len(tgt_dataset.observations)
        for _ in range(refine_steps):
            si = rng.integers(0, n_src, size=batch)
            ti = rng.integers(0, n_tgt, size=batch)
            zs = model.encode(Tensor(src_dataset.observations[si]))
            zt = model.encode(Tensor(tgt_dataset.observations[ti]))
            # lam=0: no gradient reaches the encoder, and only the critic updates
            d = pearson_dst(model.critic_head(zs, 0.0), model.critic_head(zt, 0.0))
            loss = ag.mul(d, -1.0)
            model.zero_grad()
            loss.backward()
            opt.step(0.0)

    def _mean_stats(obs):
        mean_u = 0.0
        mean_conj = 0.0
        n = 0
        with ag.no_grad():
            for lo in range(0, len(obs), batch):
                z = model.encode(Tensor(obs[lo:lo + batch]))
                u = model.critic_head(z, 0.0).data
                k = u.shape[0]
                mean_u += u.mean() * k
                mean_conj += (0.25 * u * u + u).mean() * k
                n += k
        return mean_u / n, mean_conj / n

    mu_s, _ = _mean_stats(src_dataset.observations)
    _, conj_t = _mean_stats(tgt_dataset.observations)
    return float(mu_s - conj_t)


def joint_risk_proxy(src_dataset, tgt_dataset, model_config: ModelConfig,
                     settings: TrainSettings, eval_dataset) -> float:
    """Proxy for the ideal joint risk: IoU after training on pooled labels.

    Only a proxy: the true quantity minimizes over the whole hypothesis
    class, which is intractable.
    """
    from .dataset import ArrayDataset

    pooled = ArrayDataset(
        observations=np.concatenate([src_dataset.observations, tgt_dataset.observations]),
        labels=np.concatenate([src_dataset.labels, tgt_dataset.labels]),
        grid=src_dataset.grid,
    )
    pooled_settings = replace(settings, strategy="no_adapt")
    result = train(model_config, pooled, pooled, pooled_settings, eval_dataset=eval_dataset)
    return result.final_iou if result.final_iou is not None else float("nan")
