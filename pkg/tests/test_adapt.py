import math

import numpy as np
import pytest

from simgap import adapt
from simgap.adapt import (
    LossWeights,
    TrainSettings,
    dann_dst,
    jensen_dst,
    pearson_dst,
    pseudo_loss,
    seg_loss,
    train,
)
from simgap.bev import GridSpec
from simgap.dataset import ArrayDataset
from simgap.nn import autograd as ag
from simgap.nn.autograd import Tensor
from simgap.nn.model import AdaptModel, GrlSchedule, ModelConfig
from simgap.nn.optim import OptimizerConfig
from simgap.sensor import AugmentPolicy

LN2 = math.log(2.0)


class TestSegLoss:
    def test_perfect_prediction_tiny(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        assert seg_loss(Tensor(y), y, beta=2.13).item() <= 1e-5

    def test_single_pixel_half(self):
        v = seg_loss(Tensor(np.array([0.5], np.float32)), np.array([1.0], np.float32), beta=1.0)
        assert v.item() == pytest.approx(LN2, rel=1e-5)

    def test_single_pixel_weighted(self):
        v = seg_loss(Tensor(np.array([0.5], np.float32)), np.array([1.0], np.float32), beta=2.13)
        assert v.item() == pytest.approx(2.13 * LN2, rel=1e-5)

    def test_nonnegative_random(self, rng):
        for _ in range(50):
            p = rng.uniform(0.01, 0.99, size=(4, 4)).astype(np.float32)
            y = (rng.random((4, 4)) < 0.3).astype(np.float32)
            assert seg_loss(Tensor(p), y, beta=2.13).item() >= 0.0

    def test_beta_increases_loss_with_missed_positive(self, rng):
        p = np.full((3, 3), 0.4, np.float32)
        y = np.zeros((3, 3), np.float32)
        y[1, 1] = 1.0
        lo = seg_loss(Tensor(p), y, beta=1.0).item()
        hi = seg_loss(Tensor(p), y, beta=3.0).item()
        assert hi > lo

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="seg_loss"):
            seg_loss(Tensor(np.zeros((2, 2), np.float32)), np.zeros((3, 3)), beta=1.0)


class TestPearson:
    def test_reference_points(self):
        u2 = np.full((2, 8), 2.0, np.float32)
        u0 = np.zeros((2, 8), np.float32)
        assert pearson_dst(u2, u0).item() == pytest.approx(2.0, abs=1e-6)
        assert pearson_dst(u0, u2).item() == pytest.approx(-3.0, abs=1e-6)
        assert pearson_dst(u0, u0).item() == pytest.approx(0.0, abs=1e-6)

    def test_linear_in_source_mean(self, rng):
        ut = rng.standard_normal((3, 5)).astype(np.float32)
        base = pearson_dst(np.zeros((3, 5), np.float32), ut).item()
        for shift in (0.5, 1.7, -2.0):
            us = np.full((3, 5), shift, np.float32)
            assert pearson_dst(us, ut).item() == pytest.approx(base + shift, abs=1e-5)

    def test_shared_output_nonpositive(self, rng):
        for _ in range(100):
            u = rng.standard_normal((2, 6)).astype(np.float32)
            assert pearson_dst(u, u).item() <= 1e-7
        z = np.zeros((2, 6), np.float32)
        assert pearson_dst(z, z).item() == 0.0


class TestDann:
    def test_indifferent_critic(self):
        u = np.zeros((2, 4), np.float32)
        assert dann_dst(u, u).item() == pytest.approx(-LN2, rel=1e-6)

    def test_perfect_discrimination_limit(self):
        us = np.full((2, 4), 40.0, np.float32)
        ut = np.full((2, 4), -40.0, np.float32)
        assert dann_dst(us, ut).item() == pytest.approx(0.0, abs=1e-6)

    def test_permutation_sensitive(self, rng):
        us = rng.standard_normal((2, 4)).astype(np.float32) + 1.0
        ut = rng.standard_normal((2, 4)).astype(np.float32) - 1.0
        assert dann_dst(us, ut).item() != pytest.approx(dann_dst(ut, us).item(), abs=1e-9)


class TestJensen:
    def test_zero_critic(self):
        u = np.zeros((2, 4), np.float32)
        assert jensen_dst(u, u).item() == pytest.approx(0.0, abs=1e-7)

    def test_activation_stays_below_log2(self, rng):
        # the bounded activation keeps the conjugate argument in domain
        u = (rng.standard_normal(1000) * 5).astype(np.float64)
        act = LN2 - np.log1p(np.exp(-u))
        assert (act < LN2).all()

    def test_finite_for_wide_inputs(self, rng):
        us = rng.uniform(-10, 10, size=(4, 8)).astype(np.float32)
        ut = rng.uniform(-10, 10, size=(4, 8)).astype(np.float32)
        assert np.isfinite(jensen_dst(us, ut).item())


class TestPseudoLoss:
    def test_nothing_confident(self):
        p = np.full((2, 3), 0.5, np.float32)
        pa = Tensor(np.full((2, 3), 0.5, np.float32))
        assert pseudo_loss(p, pa, tau=0.9, beta=1.0).item() == 0.0

    def test_confident_positive(self):
        p = np.array([0.95], np.float32)
        pa = Tensor(np.array([0.95], np.float32))
        v = pseudo_loss(p, pa, tau=0.9, beta=1.0)
        assert v.item() == pytest.approx(-math.log(0.95), rel=1e-5)

    def test_confident_negative(self):
        p = np.array([0.02], np.float32)
        pa = Tensor(np.array([0.5], np.float32))
        v = pseudo_loss(p, pa, tau=0.9, beta=1.0)
        assert v.item() == pytest.approx(LN2, rel=1e-5)

    def test_count_normalization(self):
        p = np.array([0.95, 0.95, 0.5, 0.5], np.float32)
        pa = Tensor(np.array([0.95, 0.95, 0.5, 0.5], np.float32))
        v = pseudo_loss(p, pa, tau=0.9, beta=1.0)
        assert v.item() == pytest.approx(-math.log(0.95), rel=1e-5)

    def test_stop_gradient_on_clean_prediction(self):
        src = Tensor(np.array([3.0], np.float64), requires_grad=True)
        p_clean = ag.sigmoid(src).data  # constant snapshot
        pa = Tensor(np.array([0.8], np.float64), requires_grad=True)
        pseudo_loss(p_clean, pa, tau=0.9, beta=1.0).backward()
        assert src.grad is None
        assert pa.grad is not None


class TestGrlSignContract:
    def test_one_pixel_hand_gradients(self):
        # scalar encoder w, critic v, one source and one target pixel
        w = Tensor(np.array([1.3], np.float64), requires_grad=True)
        v = Tensor(np.array([0.7], np.float64), requires_grad=True)
        xs, xt = 0.9, -0.4
        lam, lam_dst = 0.78, 1.87

        zs = ag.mul(w, xs)
        zt = ag.mul(w, xt)
        us = ag.mul(ag.grl(zs, lam), v)
        ut = ag.mul(ag.grl(zt, lam), v)
        d = pearson_dst(us, ut)
        ag.mul(d, -lam_dst).backward()

        wv, vv = w.data[0], v.data[0]
        # critic ascends d: dd/dv = z_s - (v z_t^2 / 2 + z_t)
        dd_dv = wv * xs - (vv * (wv * xt) ** 2 / 2.0 + wv * xt)
        assert v.grad[0] == pytest.approx(-lam_dst * dd_dv, rel=1e-12)
        # encoder receives -lam times the unreversed signal, i.e. descends d
        ut = vv * wv * xt
        dd_dw_unreversed = vv * xs - (ut / 2.0 + 1.0) * vv * xt
        assert w.grad[0] == pytest.approx(lam * lam_dst * dd_dw_unreversed, rel=1e-12)

    def test_encoder_direction_flips_with_reversal(self):
        # replacing the GRL with the identity flips the encoder sign exactly
        def run(lam):
            w = Tensor(np.array([1.1], np.float64), requires_grad=True)
            v = Tensor(np.array([0.5], np.float64), requires_grad=True)
            zs, zt = ag.mul(w, 1.0), ag.mul(w, -2.0)
            d = pearson_dst(ag.mul(ag.grl(zs, lam), v), ag.mul(ag.grl(zt, lam), v))
            ag.mul(d, -1.0).backward()
            return w.grad[0]

        assert run(1.0) == pytest.approx(-run(-1.0), rel=1e-12)


def _toy_datasets(rng, n=24, grid_size=16, gap=0.0):
    spec = GridSpec(extent=4.0, resolution=0.5)
    obs_s = rng.random((n, 3, grid_size, grid_size)).astype(np.float32)
    obs_t = np.clip(obs_s + gap * rng.standard_normal(obs_s.shape).astype(np.float32), 0, 1)
    labels = (rng.random((n, grid_size, grid_size)) < 0.1).astype(np.uint8)
    src = ArrayDataset(labels=labels, grid=spec, observations=obs_s)
    tgt = ArrayDataset(labels=labels.copy(), grid=spec, observations=obs_t)
    return src, tgt


def _tiny_settings(strategy, epochs=1, seed=7):
    return TrainSettings(
        strategy=strategy,
        weights=LossWeights(),
        schedule=GrlSchedule(lambda_max=0.78, warmup_iters=10),
        optimizer=OptimizerConfig(lr=0.01),
        epochs=epochs,
        seed=seed,
        augment=AugmentPolicy(n_ops=1, magnitude=5, pool=("gaussian_noise",)),
        eval_every=0,
    )


TINY_MODEL = ModelConfig(grid_size=16, widths=(4, 8, 8, 8), head_mid=4, critic_mid=4)


class TestTrainLoop:
    def test_no_adapt_zeroes_other_terms(self, rng):
        src, tgt = _toy_datasets(rng)
        result = train(TINY_MODEL, src, tgt, _tiny_settings("no_adapt"))
        assert all(m["d_st"] == 0.0 for m in result.metrics)
        assert all(m["pseudo_loss"] == 0.0 for m in result.metrics)

    def test_no_adapt_leaves_critic_untouched(self, rng):
        src, tgt = _toy_datasets(rng)
        settings = _tiny_settings("no_adapt")
        result = train(TINY_MODEL, src, tgt, settings)
        fresh = AdaptModel(TINY_MODEL, np.random.default_rng(
            np.random.SeedSequence(entropy=settings.seed, spawn_key=(1,))))
        for name in result.model.parameter_groups()["critic"]:
            assert np.array_equal(result.model.params[name].data, fresh.params[name].data)
        # encoder did change
        assert not all(np.array_equal(result.model.params[n].data, fresh.params[n].data)
                       for n in result.model.parameter_groups()["encoder"])

    @pytest.mark.parametrize("strategy", adapt.STRATEGIES)
    def test_all_strategies_run_and_log(self, rng, strategy):
        src, tgt = _toy_datasets(rng)
        result = train(TINY_MODEL, src, tgt, _tiny_settings(strategy))
        assert len(result.metrics) == len(src) // 4
        for row in result.metrics:
            assert set(row) == set(adapt.METRIC_COLUMNS)
            assert np.isfinite(row["seg_loss"])

    def test_deterministic_given_seed(self, rng):
        src, tgt = _toy_datasets(rng)
        r1 = train(TINY_MODEL, src, tgt, _tiny_settings("fdal_pearson_pseudo", epochs=2))
        r2 = train(TINY_MODEL, src, tgt, _tiny_settings("fdal_pearson_pseudo", epochs=2))
        assert r1.model.state_blob() == r2.model.state_blob()
        for a, b in zip(r1.metrics, r2.metrics):
            assert a == b

    def test_resume_reproduces_uninterrupted_run(self, rng, tmp_path):
        src, tgt = _toy_datasets(rng)
        settings = _tiny_settings("fdal_pearson_pseudo", epochs=3)
        full = train(TINY_MODEL, src, tgt, settings)

        ckpt = tmp_path / "mid.ckpt"
        iters_per_epoch = len(src) // 4
        train(TINY_MODEL, src, tgt, _tiny_settings("fdal_pearson_pseudo", epochs=1),
              checkpoint_path=ckpt)
        resumed = train(TINY_MODEL, src, tgt, settings, resume_from=ckpt)
        assert resumed.model.state_blob() == full.model.state_blob()
        tail = full.metrics[iters_per_epoch:]
        assert len(resumed.metrics) == len(tail)
        for a, b in zip(resumed.metrics, tail):
            assert a == b

    def test_divergence_aborts_with_checkpoint(self, rng, tmp_path):
        src, tgt = _toy_datasets(rng)
        settings = _tiny_settings("no_adapt")
        settings.optimizer = OptimizerConfig(lr=1e12, clip_norm=None)  # provoke blowup
        ckpt = tmp_path / "last.ckpt"
        with pytest.raises(Exception, match="diverged"):
            train(TINY_MODEL, src, tgt, settings, checkpoint_path=ckpt)

    def test_semi_supervised_fraction_changes_training(self, rng):
        src, tgt = _toy_datasets(rng, gap=0.2)
        base = train(TINY_MODEL, src, tgt, _tiny_settings("no_adapt", epochs=2))
        semi_settings = _tiny_settings("no_adapt", epochs=2)
        semi_settings.target_label_fraction = 0.5
        semi = train(TINY_MODEL, src, tgt, semi_settings)
        assert semi.model.state_blob() != base.model.state_blob()


class _StubModel:
    def __init__(self, outputs):
        self.outputs = outputs

    def predict(self, obs):
        return self.outputs[: obs.shape[0]]


class TestEvaluate:
    def _dataset(self, labels):
        spec = GridSpec(extent=labels.shape[1] / 2.0, resolution=1.0)
        obs = np.zeros((labels.shape[0], 3, labels.shape[1], labels.shape[2]), np.float32)
        return ArrayDataset(labels=labels.astype(np.uint8), grid=spec, observations=obs)

    def test_perfect_model(self):
        labels = np.zeros((3, 4, 4)); labels[:, 1:3, 1:3] = 1
        ds = self._dataset(labels)
        mean, per = adapt.evaluate(_StubModel(labels.astype(np.float32)), ds)
        assert mean == 1.0 and per == [1.0, 1.0, 1.0]

    def test_constant_zero_output(self):
        labels = np.ones((2, 4, 4))
        ds = self._dataset(labels)
        mean, _ = adapt.evaluate(_StubModel(np.zeros((2, 4, 4), np.float32)), ds)
        assert mean == 0.0

    def test_hand_fixture(self):
        labels = np.zeros((2, 4, 4))
        labels[0, 0, :2] = 1          # scene 0: two cells
        labels[1, 1:3, 1:3] = 1       # scene 1: four cells
        preds = np.zeros((2, 4, 4), np.float32)
        preds[0, 0, :4] = 1.0         # covers both plus two extra -> 0.5
        preds[1, 1:3, 1:3] = 1.0      # exact -> 1.0
        ds = self._dataset(labels)
        mean, per = adapt.evaluate(_StubModel(preds), ds)
        assert per == [0.5, 1.0] and mean == 0.75

    def test_empty_dataset(self):
        ds = self._dataset(np.zeros((0, 4, 4)))
        with pytest.raises(ValueError):
            adapt.evaluate(_StubModel(np.zeros((1, 4, 4))), ds)


@pytest.mark.slow
class TestDiscrepancyEstimate:
    def _trained_zero_gap(self, rng):
        src, tgt = _toy_datasets(rng, n=48, gap=0.0)
        settings = _tiny_settings("fdal_pearson", epochs=6, seed=3)
        return train(TINY_MODEL, src, tgt, settings).model, src, tgt

    def test_no_shift_near_zero(self, rng):
        model, src, tgt = self._trained_zero_gap(rng)
        d = adapt.estimate_discrepancy(model, src, src)
        assert abs(d) <= 0.05

    def test_monotone_in_gap(self, rng):
        model, src, _ = self._trained_zero_gap(rng)
        noisy = ArrayDataset(
            labels=src.labels.copy(), grid=src.grid,
            observations=np.clip(src.observations
                                 + 0.5 * np.random.default_rng(5).standard_normal(
                                     src.observations.shape).astype(np.float32), 0, 1))
        d_same = adapt.estimate_discrepancy(model, src, src, refine_steps=50, seed=1)
        d_far = adapt.estimate_discrepancy(model, src, noisy, refine_steps=50, seed=1)
        assert d_far > d_same

    def test_refinement_tightens_lower_bound(self, rng):
        model, src, tgt = self._trained_zero_gap(rng)
        noisy = ArrayDataset(
            labels=src.labels.copy(), grid=src.grid,
            observations=np.clip(src.observations
                                 + 0.3 * np.random.default_rng(6).standard_normal(
                                     src.observations.shape).astype(np.float32), 0, 1))
        base = adapt.estimate_discrepancy(model, src, noisy)
        refined = adapt.estimate_discrepancy(model, src, noisy, refine_steps=50, seed=2)
        assert refined >= base - 1e-6
