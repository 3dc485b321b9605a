import math

import numpy as np
import pytest

from dpi.datasets import make_face_dataset, make_gaussian_dataset
from dpi.denoisers import (DenoiserTrainConfig, GaussianOracleDenoiser, TinyDenoiser,
                           holdout_noise_loss, oracle_eps, sample_unconditional,
                           train_tiny_denoiser)
from dpi.errors import NumericalError, ParameterError
from dpi.rng import stream
from dpi.schedule import build_linear_schedule, predict_x0


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(40, 1e-3, 0.06)


class TestGaussianOracle:
    def test_rejects_non_positive_variance(self, sched):
        with pytest.raises(ParameterError):
            GaussianOracleDenoiser(mu0=np.float64(0), var0=np.float64(0), sched=sched)

    def test_uninformative_prior_limit(self, sched):
        # var0 -> infinity: E[x0|x_t] -> x_t / sqrt(abar), eps -> 0
        d = GaussianOracleDenoiser(mu0=np.float64(0.3), var0=np.float64(1e12), sched=sched)
        x_t = stream(1, "x").normal((4, 4, 1))
        out = oracle_eps(d, x_t, 20, sched)
        assert np.abs(out.eps).max() < 1e-9

    def test_symmetry_point_gives_zero_noise(self, sched):
        mu0 = 0.4
        d = GaussianOracleDenoiser(mu0=np.float64(mu0), var0=np.float64(0.2), sched=sched)
        t = 17
        x_t = np.full((2, 2, 1), np.sqrt(sched.alpha_bar(t)) * mu0)
        out = oracle_eps(d, x_t, t, sched)
        assert np.abs(out.eps).max() < 1e-12

    def test_hand_value_standard_prior(self):
        # mu0=0, var0=1, abar=0.72, x_t=1:
        # E[x0|x_t] = sqrt(0.72)/(0.72+0.28) = sqrt(0.72)
        # eps = (1 - 0.72) / sqrt(0.28) = sqrt(0.28)
        s2 = build_linear_schedule(2, 0.1, 0.2)
        d = GaussianOracleDenoiser(mu0=np.float64(0.0), var0=np.float64(1.0), sched=s2)
        e_x0 = d.posterior_mean_x0(np.ones((1, 1, 1)), 2)
        assert math.isclose(e_x0[0, 0, 0], math.sqrt(0.72), rel_tol=1e-12)
        out = oracle_eps(d, np.ones((1, 1, 1)), 2, s2)
        assert math.isclose(out.eps[0, 0, 0], math.sqrt(0.28), rel_tol=1e-12)
        assert out.v is None

    def test_predict_x0_recovers_posterior_mean(self, sched):
        # independent recomputation of the conjugate-Gaussian posterior mean
        mu0 = np.array([[0.2, -0.3]])[:, :, None]
        var0 = np.array([[0.5, 0.8]])[:, :, None]
        d = GaussianOracleDenoiser(mu0=mu0, var0=var0, sched=sched)
        x_t = stream(2, "x").normal((1, 2, 1))
        for t in (1, 13, 40):
            ab = sched.alpha_bar(t)
            expected = (np.sqrt(ab) * var0 * x_t + (1 - ab) * mu0) / (ab * var0 + 1 - ab)
            got = predict_x0(x_t, oracle_eps(d, x_t, t, sched).eps, t, sched)
            assert np.abs(got - expected).max() < 1e-10

    def test_purity(self, sched):
        d = GaussianOracleDenoiser(mu0=np.float64(0.1), var0=np.float64(0.3), sched=sched)
        x_t = stream(3, "x").normal((3, 3, 1))
        a = d.evaluate(x_t, 7)
        b = d.evaluate(x_t, 7)
        assert np.array_equal(a.eps, b.eps)


class TestTinyDenoiserTraining:
    def test_initial_loss_near_one(self, sched):
        # zero-initialized head predicts 0, so the loss starts at E||eps||^2 = 1
        imgs = make_face_dataset(8, seed=5)
        model = TinyDenoiser.create(channels=1, seed=0)
        loss = holdout_noise_loss(model, imgs, sched)
        assert abs(loss - 1.0) < 0.1

    def test_smoke_run_decreases_loss(self, sched):
        imgs = make_face_dataset(8, seed=6)
        cfg = DenoiserTrainConfig(learning_rate=3e-4, batch_size=4, epochs=2,
                                  ema_decay=0.99, seed=1)
        result = train_tiny_denoiser(imgs, sched, cfg)
        losses = [row[2] for row in result.history]
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]
        assert result.model.param_count == result.ema_model.param_count

    def test_deterministic_history(self, sched):
        imgs = make_face_dataset(8, seed=7)
        cfg = DenoiserTrainConfig(batch_size=4, epochs=1, seed=3)
        h1 = train_tiny_denoiser(imgs, sched, cfg).history
        h2 = train_tiny_denoiser(imgs, sched, cfg).history
        assert h1 == h2

    def test_empty_dataset_rejected(self, sched):
        with pytest.raises(ParameterError):
            train_tiny_denoiser([], sched, DenoiserTrainConfig())

    def test_divergence_aborts(self, sched):
        imgs = make_face_dataset(8, seed=8)
        cfg = DenoiserTrainConfig(learning_rate=1e8, batch_size=8, epochs=50, seed=1)
        with pytest.raises(NumericalError):
            train_tiny_denoiser(imgs, sched, cfg)

    def test_checkpoint_roundtrip(self, sched, tmp_path):
        imgs = make_face_dataset(8, seed=9)
        cfg = DenoiserTrainConfig(batch_size=8, epochs=1, seed=2)
        model = train_tiny_denoiser(imgs, sched, cfg).model
        path = tmp_path / "tiny.ckpt"
        model.save(path)
        loaded = TinyDenoiser.load(path)
        # parameters survive save -> load exactly at float32 resolution
        for name, arr in model.params.items():
            assert np.array_equal(loaded.params[name],
                                  arr.astype(np.float32).astype(np.float64))
        x = stream(4, "x").normal((8, 8, 1))
        a = model.evaluate(x, 5).eps
        b = loaded.evaluate(x, 5).eps
        assert np.allclose(a, b, atol=1e-5)


class TestUnconditionalSampling:
    def test_single_step_schedule_deterministic(self):
        s1 = build_linear_schedule(1, 0.1, 0.1)
        d = GaussianOracleDenoiser(mu0=np.float64(0.2), var0=np.float64(0.4), sched=s1)
        a = sample_unconditional(d, s1, (5, 2, 2, 1), stream(6, "mc"))
        b = sample_unconditional(d, s1, (5, 2, 2, 1), stream(6, "mc"))
        assert np.array_equal(a, b)

    def test_moment_recovery_short_chain(self):
        # quick version; the full-strength run lives in the acceptance suite
        s = build_linear_schedule(300, 1e-4, 0.04)
        d = GaussianOracleDenoiser(mu0=np.float64(0.3), var0=np.float64(0.49), sched=s)
        xs = sample_unconditional(d, s, (4000,), stream(7, "mc"))
        se = xs.std() / math.sqrt(len(xs))
        assert abs(xs.mean() - 0.3) < 4 * se
        assert abs(xs.var() - 0.49) / 0.49 < 0.08

    def test_gaussian_dataset_matches_oracle_law(self):
        mu0 = np.full((2, 2, 1), 0.2)
        var0 = np.full((2, 2, 1), 0.09)
        imgs = make_gaussian_dataset(mu0, var0, 4000, seed=11)
        arr = np.stack(imgs)
        assert np.abs(arr.mean(axis=0) - mu0).max() < 0.02
        assert np.abs(arr.var(axis=0) - var0).max() < 0.01
