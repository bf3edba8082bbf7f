import math

import numpy as np
import pytest

from simgap.nn import autograd as ag
from simgap.nn.autograd import Tensor
from simgap.nn.model import (
    AdaptModel,
    GrlSchedule,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from simgap.nn.optim import DivergedError, OptimizerConfig, SgdNesterov


class TestGrl:
    def test_forward_bit_identity(self, rng):
        z = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        out = ag.grl(z, 0.78)
        assert out.data is z.data  # shares the buffer: exact identity

    def test_backward_scales_by_minus_lambda(self, rng):
        for lam in (0.0, 0.3, 0.78):
            z = Tensor(rng.standard_normal((3, 3)).astype(np.float64), requires_grad=True)
            ag.tsum(ag.mul(ag.grl(z, lam), 2.0)).backward()
            assert np.allclose(z.grad, -lam * 2.0)

    def test_double_reversal_positive_square(self, rng):
        lam = 0.7
        z = Tensor(rng.standard_normal(4).astype(np.float64), requires_grad=True)
        ag.tsum(ag.grl(ag.grl(z, lam), lam)).backward()
        assert np.allclose(z.grad, lam * lam)


class TestGrlSchedule:
    def test_ramp_endpoints(self):
        s = GrlSchedule(lambda_max=0.78, warmup_iters=570)
        assert s.value(0) == 0.0
        assert abs(s.value(570) - 0.78) <= 1e-3
        assert abs(s.value(10_000) - 0.78) <= 1e-3

    def test_monotone_and_continuous(self):
        s = GrlSchedule()
        vals = [s.value(t) for t in range(0, 1200, 3)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
        diffs = np.diff(vals)
        assert diffs.max() < 0.05  # no jumps

    def test_saturation_ratio(self):
        s = GrlSchedule()
        assert 0.95 <= s.value(570) / s.lambda_max <= 1.0


class TestSgdNesterov:
    def _param(self, value):
        p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
        return [("w", p)], p

    def test_zero_gradient_keeps_params(self):
        params, p = self._param(1.5)
        opt = SgdNesterov(params, OptimizerConfig(lr=0.1, momentum=0.9))
        p.grad = np.zeros_like(p.data)
        opt.step(0.0)
        assert p.data[0] == 1.5
        assert np.all(opt.velocities["w"] == 0.0)  # 0.9 * 0 + 0

    def test_plain_sgd_decrement(self):
        params, p = self._param(1.0)
        opt = SgdNesterov(params, OptimizerConfig(lr=0.1, momentum=0.0, clip_norm=None))
        p.grad = np.ones_like(p.data)
        opt.step(0.0)
        assert p.data[0] == pytest.approx(0.9, abs=1e-7)

    def test_quadratic_bowl_convergence(self):
        # direct simulation oracle on f(w) = w^2 / 2
        params, p = self._param(1.0)
        opt = SgdNesterov(params, OptimizerConfig(lr=0.1, momentum=0.9, poly_power=0.0,
                                                  clip_norm=None))
        for _ in range(100):
            p.grad = p.data.copy()
            opt.step(0.0)
        assert abs(p.data[0]) < 1e-3

    def test_poly_decay(self):
        opt = SgdNesterov([], OptimizerConfig(lr=0.01, poly_power=0.70))
        assert opt.lr_at(0.0) == 0.01
        frac = 10 / 35
        assert opt.lr_at(frac) == pytest.approx(0.01 * (1 - frac) ** 0.7)
        assert opt.lr_at(1.0) == 0.0

    def test_diverged_names_parameter(self):
        params, p = self._param(1.0)
        opt = SgdNesterov(params, OptimizerConfig())
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(DivergedError, match="diverged.*w"):
            opt.step(0.0)

    def test_global_clip(self):
        params, p = self._param(0.0)
        opt = SgdNesterov(params, OptimizerConfig(lr=1.0, momentum=0.0, clip_norm=5.0))
        p.grad = np.array([50.0], dtype=np.float32)
        opt.step(0.0)
        assert p.data[0] == pytest.approx(-5.0, rel=1e-6)

    def test_per_group_clip_isolates_groups(self):
        a = Tensor(np.zeros(1, np.float32), requires_grad=True)
        b = Tensor(np.zeros(1, np.float32), requires_grad=True)
        opt = SgdNesterov([("enc.w", a), ("critic.w", b)],
                          OptimizerConfig(lr=1.0, momentum=0.0, clip_norm=5.0),
                          clip_groups={"enc.w": "encoder", "critic.w": "critic"})
        a.grad = np.array([1.0], np.float32)
        b.grad = np.array([500.0], np.float32)
        opt.step(0.0)
        assert a.data[0] == pytest.approx(-1.0)   # unaffected by critic blowup
        assert b.data[0] == pytest.approx(-5.0)


class TestAdaptModel:
    def _model(self, grid=32):
        cfg = ModelConfig(grid_size=grid, widths=(4, 8, 8, 8), head_mid=4, critic_mid=4)
        return AdaptModel(cfg, np.random.default_rng(0)), cfg

    def test_shapes(self, rng):
        model, cfg = self._model()
        x = rng.random((2, 3, 32, 32)).astype(np.float32)
        z = model.encode(Tensor(x))
        assert z.data.shape == (2, 8, 4, 4)  # grid / 8
        p = model.seg_head(z)
        assert p.data.shape == (2, 1, 32, 32)
        assert ((p.data > 0) & (p.data < 1)).all()
        u = model.critic_head(z, 0.5)
        assert u.data.shape == (2, 1, 4, 4)

    def test_critic_output_unbounded_linear(self, rng):
        model, _ = self._model()
        x = rng.random((1, 3, 32, 32)).astype(np.float32)
        z = model.encode(Tensor(x))
        u1 = model.critic_head(z, 0.0).data
        model.params["critic2.w"].data *= 100.0
        u2 = model.critic_head(z, 0.0).data
        assert np.abs(u2).max() > np.abs(u1).max() * 50  # no squashing

    def test_init_deterministic(self):
        a = AdaptModel(ModelConfig(grid_size=32, widths=(4, 8, 8, 8)), np.random.default_rng(5))
        b = AdaptModel(ModelConfig(grid_size=32, widths=(4, 8, 8, 8)), np.random.default_rng(5))
        assert a.state_blob() == b.state_blob()

    def test_grid_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(grid_size=30).latent_size

    def test_parameter_groups_cover_everything(self):
        model, _ = self._model()
        groups = model.parameter_groups()
        names = sorted(n for g in groups.values() for n in g)
        assert names == sorted(model.params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model, cfg = ModelConfig(grid_size=32, widths=(4, 8, 8, 8)), None
        m = AdaptModel(model, np.random.default_rng(3))
        velocities = {name: rng.standard_normal(p.data.shape).astype(np.float32)
                      for name, p in m.named_parameters()}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, iteration=123, schedule=GrlSchedule(0.78, 570),
                        velocities=velocities, extra={"note": "x"})
        m2, header, v2 = load_checkpoint(path)
        assert header["iteration"] == 123
        assert header["schedule"]["warmup_iters"] == 570
        assert m2.state_blob() == m.state_blob()
        for name in velocities:
            assert np.array_equal(v2[name], velocities[name])

    def test_byte_stable(self, tmp_path):
        m = AdaptModel(ModelConfig(grid_size=32, widths=(4, 8, 8, 8)), np.random.default_rng(3))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, m, iteration=7)
        save_checkpoint(p2, m, iteration=7)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b'{"magic": "nope"}\n')
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(p)
