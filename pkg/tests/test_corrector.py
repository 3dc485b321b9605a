import numpy as np
import pytest

from dpi.corrector import (ConditionSynthesis, CrtModel, CrtTrainConfig,
                           CrtTrainSample, FrozenCorrector, IdentityCorrector,
                           crt_forward, crt_gradients, loss_crt, loss_gap,
                           loss_prior, omega_schedule, train_crt)
from dpi.datasets import make_face_dataset
from dpi.degradation import DegradationConfig
from dpi.errors import ParameterError
from dpi.masks import make_fixed_mask, project_initial_condition
from dpi.nn import Adam
from dpi.rng import stream
from dpi.schedule import build_linear_schedule


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(40, 1e-3, 0.06)


def grid_condition(seed, size=8, k=2):
    fm = make_fixed_mask(size, size, k)
    base = stream(seed, "base").normal((size // k, size // k, 1)) * 0.4
    return project_initial_condition(base, fm).values, fm


def make_sample(seed, t=9, size=8):
    y_T, fm = grid_condition(seed, size)
    I_G = np.clip(stream(seed, "gt").normal((size, size, 1)) * 0.4, -1, 1)
    prev = stream(seed, "prev").normal((size, size, 1))
    return CrtTrainSample(I_G=I_G, y_T=y_T, t=t, I_G_prev=prev), fm


class TestCrtForward:
    def test_zero_initialized_head_returns_condition(self):
        model = CrtModel.create(channels=1, k=2, seed=0)
        y_T, fm = grid_condition(1)
        masked = stream(1, "m").normal((8, 8, 1)) * fm.mask[:, :, None]
        out = crt_forward(model, masked, y_T, 5)
        assert np.array_equal(out, y_T)

    def test_output_support_is_grid_for_any_parameters(self):
        model = CrtModel.create(channels=1, k=2, seed=1)
        for name in model.params:
            model.params[name] = stream(2, name).normal(model.params[name].shape) * 0.1
        y_T, fm = grid_condition(3)
        masked = stream(3, "m").normal((8, 8, 1)) * fm.mask[:, :, None]
        out = crt_forward(model, masked, y_T, 11)
        off_grid = out * (1.0 - fm.mask[:, :, None])
        assert np.all(off_grid == 0.0)
        on_grid = out[fm.mask > 0.5]
        assert np.any(on_grid != y_T[fm.mask > 0.5])  # residual actually acts

    def test_parameter_count_reported_and_stable(self):
        a = CrtModel.create(channels=1, k=2, seed=0)
        b = CrtModel.create(channels=1, k=2, seed=123)
        assert a.param_count == b.param_count > 0

    def test_shape_mismatch_rejected(self):
        model = CrtModel.create(channels=1, k=2, seed=0)
        with pytest.raises(ParameterError):
            crt_forward(model, np.zeros((8, 8, 1)), np.zeros((4, 4, 1)), 1)


class TestStubCorrectors:
    def test_identity_returns_masked_grid_values(self):
        stub = IdentityCorrector(k=2)
        fm = make_fixed_mask(8, 8, 2)
        x = stream(4, "x").normal((8, 8, 1))
        out = stub.correct(x * fm.mask[:, :, None], np.zeros((8, 8, 1)), 3)
        assert np.array_equal(out, x * fm.mask[:, :, None])

    def test_frozen_pins_initial_condition(self):
        stub = FrozenCorrector(k=2)
        y_T, fm = grid_condition(5)
        out = stub.correct(stream(5, "x").normal((8, 8, 1)), y_T, 3)
        assert np.array_equal(out, y_T)


class TestLosses:
    def test_perfect_output_zero_prior_loss(self):
        model = CrtModel.create(channels=1, k=2, seed=0)  # zero head: output == y_T
        y_T, fm = grid_condition(6)
        sample = CrtTrainSample(I_G=y_T.copy(), y_T=y_T, t=5,
                                I_G_prev=stream(6, "p").normal((8, 8, 1)))
        assert loss_prior(model, sample) == 0.0

    def test_unit_error(self):
        model = CrtModel.create(channels=1, k=2, seed=0)
        fm = make_fixed_mask(8, 8, 2)
        sample = CrtTrainSample(I_G=np.ones((8, 8, 1)), y_T=np.zeros((8, 8, 1)),
                                t=5, I_G_prev=np.zeros((8, 8, 1)))
        assert np.isclose(loss_prior(model, sample), 1.0)

    def test_prior_loss_matches_naive_recompute(self):
        model = CrtModel.create(channels=1, k=2, seed=7)
        model.params["head.W"] = stream(7, "hw").normal(model.params["head.W"].shape) * 0.1
        sample, fm = make_sample(8)
        got = loss_prior(model, sample)
        pred = crt_forward(model, sample.I_G_prev * fm.mask[:, :, None],
                           sample.y_T, sample.t)
        acc, n = 0.0, 0
        for i in range(8):
            for j in range(8):
                if fm.mask[i, j]:
                    acc += (sample.I_G[i, j, 0] - pred[i, j, 0]) ** 2
                    n += 1
        assert np.isclose(got, acc / n, rtol=1e-12)

    def test_gap_requires_first_pass_output(self):
        model = CrtModel.create(channels=1, k=2, seed=0)
        sample, _ = make_sample(9)
        with pytest.raises(ParameterError):
            loss_gap(model, sample)

    def test_blend_endpoints_and_midpoint(self):
        model = CrtModel.create(channels=1, k=2, seed=10)
        model.params["head.W"] = stream(10, "hw").normal(model.params["head.W"].shape) * 0.1
        sample, fm = make_sample(11)
        sample.x_hat_crt = crt_forward(model, sample.I_G_prev * fm.mask[:, :, None],
                                       sample.y_T, sample.t)
        lp = loss_prior(model, sample)
        lg = loss_gap(model, sample)
        assert np.isclose(loss_crt(model, sample, 1.0), lp)
        assert np.isclose(loss_crt(model, sample, 0.0), lg)
        assert np.isclose(loss_crt(model, sample, 0.5), 0.5 * lp + 0.5 * lg)
        with pytest.raises(ParameterError):
            loss_crt(model, sample, 1.5)


class TestOmegaSchedule:
    def test_bounds_and_monotonicity(self):
        T = 57
        vals = [omega_schedule(t, T) for t in range(1, T + 1)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(a < b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ParameterError):
            omega_schedule(0, 10)


class TestGradients:
    def test_duplicated_sample_equals_single(self, sched):
        model = CrtModel.create(channels=1, k=2, seed=12)
        sample, fm = make_sample(13)
        sample.x_hat_crt = crt_forward(model, sample.I_G_prev * fm.mask[:, :, None],
                                       sample.y_T, sample.t)
        dup = CrtTrainSample(I_G=sample.I_G, y_T=sample.y_T, t=sample.t,
                             I_G_prev=sample.I_G_prev, x_hat_crt=sample.x_hat_crt)
        l1, g1 = crt_gradients(model, [sample], T=sched.T)
        l2, g2 = crt_gradients(model, [sample, dup], T=sched.T)
        assert np.isclose(l1, l2)
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-12)

    def test_zero_input_zero_target_stationary(self, sched):
        model = CrtModel.create(channels=1, k=2, seed=0)  # zero head
        zeros = np.zeros((8, 8, 1))
        sample = CrtTrainSample(I_G=zeros, y_T=zeros, t=5, I_G_prev=zeros,
                                x_hat_crt=zeros)
        loss, grads = crt_gradients(model, [sample], T=sched.T)
        assert loss == 0.0
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_gradients_reported_for_every_parameter(self, sched):
        model = CrtModel.create(channels=1, k=2, seed=14)
        sample, _ = make_sample(15)
        _, grads = crt_gradients(model, [sample], T=sched.T)
        assert set(grads) == set(model.params)


class TestTrainCrt:
    def test_smoke_run_decreases_loss(self, sched):
        imgs = make_face_dataset(8, seed=16)
        cfg = CrtTrainConfig(learning_rate=3e-4, batch_size=4, epochs=2,
                             ema_decay=0.99, seed=1,
                             synthesis=ConditionSynthesis(k=2, kind="bicubic", scale=4))
        result = train_crt(imgs, sched, cfg)
        losses = [row[2] for row in result.history]
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]

    def test_deterministic_history(self, sched):
        imgs = make_face_dataset(8, seed=17)
        cfg = CrtTrainConfig(batch_size=4, epochs=1, seed=5,
                             synthesis=ConditionSynthesis(k=2, kind="bicubic", scale=4))
        h1 = train_crt(imgs, sched, cfg).history
        h2 = train_crt(imgs, sched, cfg).history
        assert h1 == h2

    def test_pipeline_synthesis_mode(self, sched):
        imgs = make_face_dataset(4, seed=18)
        deg = DegradationConfig(blur_ksize=3, blur_sigma=1.0, scale=2,
                                noise_sigma=8.0, jpeg_quality=70)
        cfg = CrtTrainConfig(batch_size=4, epochs=1, seed=6,
                             synthesis=ConditionSynthesis(k=2, kind="pipeline",
                                                          degradation=deg))
        result = train_crt(imgs, sched, cfg)
        assert len(result.history) == 1

    def test_empty_dataset_rejected(self, sched):
        with pytest.raises(ParameterError):
            train_crt([], sched, CrtTrainConfig())

    def test_checkpoint_roundtrip(self, sched, tmp_path):
        imgs = make_face_dataset(4, seed=19)
        cfg = CrtTrainConfig(batch_size=4, epochs=1, seed=7,
                             synthesis=ConditionSynthesis(k=2, kind="bicubic", scale=4))
        model = train_crt(imgs, sched, cfg).model
        path = tmp_path / "crt.ckpt"
        model.save(path)
        loaded = CrtModel.load(path)
        assert loaded.k == model.k
        y_T, fm = grid_condition(20, size=8)
        masked = stream(20, "m").normal((8, 8, 1)) * fm.mask[:, :, None]
        a = model.correct(masked, y_T, 3)
        b = loaded.correct(masked, y_T, 3)
        assert np.allclose(a, b, atol=1e-5)


class TestConditionSynthesis:
    def test_bicubic_mode_shapes_and_support(self):
        syn = ConditionSynthesis(k=2, kind="bicubic", scale=4)
        gt = make_face_dataset(1, seed=21)[0]
        y_T = syn.build(gt, stream(21, "d"))
        fm = make_fixed_mask(32, 32, 2)
        assert y_T.shape == (32, 32, 1)
        assert np.all(y_T * (1 - fm.mask[:, :, None]) == 0.0)

    def test_pipeline_mode_requires_config(self):
        syn = ConditionSynthesis(k=2, kind="pipeline", degradation=None)
        gt = make_face_dataset(1, seed=22)[0]
        with pytest.raises(ParameterError):
            syn.build(gt, stream(22, "d"))
