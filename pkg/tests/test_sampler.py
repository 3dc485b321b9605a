import math

import numpy as np
import pytest

from dpi.corrector import FrozenCorrector, IdentityCorrector
from dpi.denoisers import GaussianOracleDenoiser, sample_unconditional
from dpi.errors import ParameterError
from dpi.masks import make_fixed_mask, mask_gen, project_initial_condition
from dpi.metrics import grid_mse
from dpi.rng import stream
from dpi.sampler import (DpiConfig, SampleTrace, conditional_posterior, ddim_sigma,
                         ddim_timesteps, dpi_sample, dpi_sample_ddim, fcm_combine,
                         noisy_condition, racm_combine, sample_unconditional_ddim)
from dpi.schedule import (build_linear_schedule, forward_sample, posterior_mean,
                          predict_x0)


@pytest.fixture(scope="module")
def sched2():
    return build_linear_schedule(2, 0.1, 0.2)


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(50, 1e-3, 0.08)


@pytest.fixture(scope="module")
def oracle(sched):
    return GaussianOracleDenoiser(mu0=np.float64(0.1), var0=np.float64(0.25),
                                  sched=sched)


def grid_condition_from(x0, k=2):
    fm = make_fixed_mask(x0.shape[0], x0.shape[1], k)
    return project_initial_condition(x0[::k, ::k], fm), fm


class CountingDenoiser:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def evaluate(self, x_t, t):
        self.calls += 1
        return self.inner.evaluate(x_t, t)


class TestNoisyCondition:
    def test_zero_predicted_noise(self, sched2):
        y = stream(1, "y").normal((4, 4, 1))
        out = noisy_condition(y, np.zeros_like(y), 2, sched2)
        assert np.allclose(out, np.sqrt(0.72) * y)

    def test_condition_drowned_at_high_noise(self):
        s = build_linear_schedule(500, 1e-3, 0.05)
        y = stream(2, "y").normal((4, 4, 1))
        eps = stream(2, "e").normal((4, 4, 1))
        out = noisy_condition(y, eps, 500, s)
        assert np.abs(out - eps).max() < 0.01  # abar ~ 0: condition vanishes

    def test_hand_value(self, sched2):
        out = noisy_condition(np.ones((1, 1, 1)), -np.ones((1, 1, 1)), 2, sched2)
        assert math.isclose(out[0, 0, 0], math.sqrt(0.72) - math.sqrt(0.28),
                            rel_tol=1e-12)


class TestConditionalPosterior:
    def test_clean_estimate_identity(self, sched):
        # re-noising with the predicted eps makes the implied clean estimate
        # exactly the condition again, at every timestep
        y = stream(3, "y").normal((6, 6, 1))
        for t in (1, 7, 25, 50):
            eps = stream(3, "e", t).normal(y.shape)
            y_n = noisy_condition(y, eps, t, sched)
            back = predict_x0(y_n, eps, t, sched)
            denom = np.maximum(np.abs(back), np.abs(y))
            assert (np.abs(back - y) / np.where(denom > 0, denom, 1)).max() < 1e-9

    def test_final_step_collapses_to_condition(self, sched2):
        y = stream(4, "y").normal((4, 4, 1))
        eps = stream(4, "e").normal((4, 4, 1))
        y_n = noisy_condition(y, eps, 1, sched2)
        out = conditional_posterior(y, y_n, 1, sched2, 0.0, np.zeros_like(y))
        assert np.allclose(out, y, atol=1e-12)

    def test_two_step_hand_value(self, sched2):
        # substitute schedule constants by hand: mean must equal
        # sqrt(abar_1) y + c_xt sqrt(1-abar_2) eps
        y, eps = 0.5, 0.3
        y_n = noisy_condition(np.full((1, 1, 1), y), np.full((1, 1, 1), eps), 2, sched2)
        got = conditional_posterior(np.full((1, 1, 1), y), y_n, 2, sched2, 0.0,
                                    np.zeros((1, 1, 1)))
        c_xt = math.sqrt(0.8) * 0.1 / 0.28
        want = math.sqrt(0.9) * y + c_xt * math.sqrt(0.28) * eps
        assert math.isclose(got[0, 0, 0], want, rel_tol=1e-12)

    def test_shares_supplied_variance(self, sched):
        y = stream(5, "y").normal((4, 4, 1))
        eps = stream(5, "e").normal((4, 4, 1))
        noise = stream(5, "n").normal((4, 4, 1))
        y_n = noisy_condition(y, eps, 10, sched)
        a = conditional_posterior(y, y_n, 10, sched, 0.04, noise)
        b = conditional_posterior(y, y_n, 10, sched, 0.0, noise)
        assert np.allclose(a - b, 0.2 * noise)


class TestCombinationRules:
    def test_fcm_degenerate_masks(self):
        x = stream(6, "x").normal((4, 4, 1))
        y = stream(6, "y").normal((4, 4, 1))
        all_on = make_fixed_mask(4, 4, 1)
        assert np.array_equal(fcm_combine(x, y, all_on), y)
        sparse = make_fixed_mask(4, 4, 4)  # single grid pixel at (0, 0)
        out = fcm_combine(x, y, sparse)
        assert out[0, 0, 0] == y[0, 0, 0]
        assert np.array_equal(out[1:], x[1:])
        assert np.array_equal(out[0, 1:], x[0, 1:])

    def test_fcm_pixel_preservation(self):
        x = stream(7, "x").normal((8, 8, 1))
        y = stream(7, "y").normal((8, 8, 1))
        fm = make_fixed_mask(8, 8, 2)
        out = fcm_combine(x, y, fm)
        assert np.array_equal(out[fm.mask > 0.5], y[fm.mask > 0.5])
        assert np.array_equal(out[fm.mask < 0.5], x[fm.mask < 0.5])

    def test_racm_weight_endpoints(self):
        x = stream(8, "x").normal((8, 8, 1))
        y = stream(8, "y").normal((8, 8, 1))
        fm = make_fixed_mask(8, 8, 2)
        cond = project_initial_condition(stream(8, "b").normal((4, 4, 1)), fm)
        am = mask_gen(cond.values, 2, 1.0, stream(8, "m"))
        w1 = racm_combine(x, y, am, 1.0)
        assert np.array_equal(w1[am.mask > 0.5], y[am.mask > 0.5])
        w0 = racm_combine(x, y, am, 0.0)
        assert np.array_equal(w0, x)

    def test_racm_midpoint_and_convexity(self):
        x = np.zeros((4, 4, 1))
        y = np.ones((4, 4, 1))
        fm = make_fixed_mask(4, 4, 2)
        cond = project_initial_condition(np.ones((2, 2, 1)), fm)
        am = mask_gen(cond.values, 2, 1.0, stream(9, "m"))
        mid = racm_combine(x, y, am, 0.5)
        assert np.all(mid[am.mask > 0.5] == 0.5)
        for w in (0.2, 0.7):
            out = racm_combine(x, y, am, w)
            assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_racm_rejects_out_of_range_weight(self):
        x = np.zeros((4, 4, 1))
        fm = make_fixed_mask(4, 4, 2)
        cond = project_initial_condition(np.ones((2, 2, 1)), fm)
        am = mask_gen(cond.values, 2, 1.0, stream(10, "m"))
        with pytest.raises(ParameterError):
            racm_combine(x, x, am, 1.5)


class TestDdimSigma:
    def test_eta_zero(self, sched):
        assert ddim_sigma(10, 0.0, sched) == 0.0
        assert ddim_sigma(10, 0.0, sched, form="canonical") == 0.0

    def test_first_transition_is_deterministic(self, sched):
        assert ddim_sigma(5, 0.7, sched, t_prev=0) == 0.0

    def test_printed_form_hand_value(self, sched2):
        # T=2 schedule, t=2, eta=1: sigma^2 = sqrt(0.1/0.28) * sqrt(0.28/0.9)
        sig = ddim_sigma(2, 1.0, sched2, t_prev=1, form="printed")
        want_sq = math.sqrt(0.1 / 0.28) * math.sqrt(0.28 / 0.9)
        assert math.isclose(sig * sig, want_sq, rel_tol=1e-12)

    def test_canonical_form_hand_value(self, sched2):
        sig = ddim_sigma(2, 1.0, sched2, t_prev=1, form="canonical")
        want = math.sqrt(0.1 / 0.28) * math.sqrt(1.0 - 0.72 / 0.9)
        assert math.isclose(sig, want, rel_tol=1e-12)

    def test_timestep_grid(self):
        ts = ddim_timesteps(1000, 20)
        assert ts[0] == 1 and ts[-1] == 1000 and len(ts) == 20
        assert np.all(np.diff(ts) > 0)
        gaps = np.diff(ts)
        assert gaps.max() - gaps.min() <= 1  # uniform up to rounding
        assert ddim_timesteps(10, 10).tolist() == list(range(1, 11))
        with pytest.raises(ParameterError):
            ddim_timesteps(10, 11)


class TestDpiSampleAncestral:
    def test_config_validation(self, sched, oracle):
        x0 = stream(11, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        bad_tau = DpiConfig(tau=99, steps=50, k=2)
        with pytest.raises(ParameterError):
            dpi_sample(oracle, FrozenCorrector(k=2), cond, bad_tau, sched,
                       stream(1, "r"))
        wrong_steps = DpiConfig(tau=10, steps=49, k=2)
        with pytest.raises(ParameterError):
            dpi_sample(oracle, FrozenCorrector(k=2), cond, wrong_steps, sched,
                       stream(1, "r"))

    def test_stage_switch_exactly_at_tau(self, sched, oracle):
        x0 = stream(12, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=17, s=1.2, omega=40.0, k=2, steps=50, seed=4)
        tr = SampleTrace()
        dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                   stream(4, "r"), trace=tr)
        for t, stage, w, _ in tr.rows:
            assert stage == ("fcm" if t > 17 else "racm")
            if stage == "fcm":
                assert w == 1.0
            else:
                assert 0.0 <= w <= 1.0

    def test_single_denoiser_evaluation_per_step(self, sched, oracle):
        counter = CountingDenoiser(oracle)
        x0 = stream(13, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=10, s=1.2, omega=40.0, k=2, steps=50, seed=5)
        dpi_sample(counter, FrozenCorrector(k=2), cond, cfg, sched, stream(5, "r"))
        assert counter.calls == sched.T

    def test_seeded_determinism(self, sched, oracle):
        x0 = stream(14, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=10, s=1.2, omega=40.0, k=2, steps=50, seed=6)
        a = dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched, stream(6, "r"))
        b = dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched, stream(6, "r"))
        assert np.array_equal(a, b)

    def test_missing_corrector_warns_and_freezes(self, sched, oracle):
        x0 = stream(15, "x").normal((8, 8, 1))
        cond, fm = grid_condition_from(x0)
        cfg = DpiConfig(tau=0, s=1.2, omega=40.0, k=2, steps=50, seed=7)
        with pytest.warns(UserWarning):
            out = dpi_sample(oracle, None, cond, cfg, sched, stream(7, "r"))
        assert np.isfinite(out).all()

    def test_full_fcm_pins_grid_to_condition(self, sched, oracle):
        # tau=0 with a frozen condition: the final step pastes the condition
        # exactly onto the grid
        x0 = np.clip(stream(16, "x").normal((8, 8, 1)) * 0.5, -1, 1)
        cond, fm = grid_condition_from(x0)
        cfg = DpiConfig(tau=0, s=1.2, omega=40.0, k=2, steps=50, seed=8)
        out = dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched, stream(8, "r"))
        assert grid_mse(out, x0, fm) < 1e-20

    def test_grid_consistency_split_run(self, sched, oracle):
        # frozen threshold from repeated runs of this exact configuration
        # (mid-split keeps the weak stage short; measured grid MSE stays
        # well under 0.2 across seeds while unrelated images sit near 0.5)
        x0 = np.clip(stream(17, "x").normal((8, 8, 1)) * 0.5, -1, 1)
        cond, fm = grid_condition_from(x0)
        cfg = DpiConfig(tau=10, s=1.2, omega=40.0, k=2, steps=50, seed=9)
        out = dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched, stream(9, "r"))
        assert grid_mse(out, x0, fm) < 0.2

    def test_trace_timesteps_strictly_decreasing(self, sched, oracle):
        x0 = stream(18, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=25, s=1.2, omega=40.0, k=2, steps=50, seed=10)
        tr = SampleTrace(every=3)
        dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                   stream(10, "r"), trace=tr)
        ts = [t for t, *_ in tr.snapshots]
        assert all(a > b for a, b in zip(ts, ts[1:]))
        racm_rows = [r for r in tr.rows if r[1] == "racm"]
        assert all(pop >= 0 for *_, pop in racm_rows)


class TestDpiSampleDdim:
    def test_eta_zero_bit_identical(self, sched, oracle):
        x0 = stream(19, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=5, s=1.4, omega=30.0, k=2, sampler_kind="implicit",
                        steps=15, eta=0.0, seed=11)
        a = dpi_sample_ddim(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                            stream(11, "r"))
        b = dpi_sample_ddim(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                            stream(11, "r"))
        assert np.array_equal(a, b)

    def test_wrong_kind_rejected(self, sched, oracle):
        x0 = stream(20, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        with pytest.raises(ParameterError):
            dpi_sample_ddim(oracle, FrozenCorrector(k=2), cond,
                            DpiConfig(tau=5, steps=15, k=2), sched, stream(12, "r"))
        with pytest.raises(ParameterError):
            dpi_sample(oracle, FrozenCorrector(k=2), cond,
                       DpiConfig(tau=5, steps=50, k=2, sampler_kind="implicit"),
                       sched, stream(12, "r"))

    def test_neutral_config_reduces_to_unconditional_chain(self, sched, oracle):
        # tau = steps (always the weighted stage) with omega -> inf gives w = 0,
        # so the x branch is exactly the plain implicit chain
        x0 = stream(21, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=15, s=1.2, omega=1e18, k=2, sampler_kind="implicit",
                        steps=15, eta=0.1, seed=13)
        a = dpi_sample_ddim(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                            stream(13, "r"))
        b = sample_unconditional_ddim(oracle, sched, (8, 8, 1), 15, 0.1,
                                      stream(13, "r"))
        # w = i / omega is tiny but nonzero, so agreement is near-exact
        assert np.allclose(a, b, atol=1e-12, rtol=0)

    def test_single_denoiser_evaluation_per_step(self, sched, oracle):
        counter = CountingDenoiser(oracle)
        x0 = stream(22, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=7, s=1.4, omega=30.0, k=2, sampler_kind="implicit",
                        steps=20, eta=0.1, seed=14)
        tr = SampleTrace()
        dpi_sample_ddim(counter, FrozenCorrector(k=2), cond, cfg, sched,
                        stream(14, "r"), trace=tr)
        assert counter.calls == 20
        assert tr.denoiser_calls == 20

    def test_stage_split_uses_subsequence_index(self, sched, oracle):
        x0 = stream(23, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=7, s=1.4, omega=30.0, k=2, sampler_kind="implicit",
                        steps=20, eta=0.1, seed=15)
        tr = SampleTrace()
        dpi_sample_ddim(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                        stream(15, "r"), trace=tr)
        stages = [r[1] for r in tr.rows]
        assert stages[:13] == ["fcm"] * 13  # i = 20..8 above the split
        assert stages[13:] == ["racm"] * 7  # i = 7..1 at and below it
        ws = [r[2] for r in tr.rows if r[1] == "racm"]
        assert ws == [i / 30.0 for i in range(7, 0, -1)]

    def test_sigma_cap_keeps_updates_finite(self, oracle):
        # the printed sigma exceeds 1 - abar_prev early in long schedules;
        # the cap must keep every update real and finite
        s = build_linear_schedule(1000, 1e-4, 0.02)
        d = GaussianOracleDenoiser(mu0=np.float64(0.1), var0=np.float64(0.25), sched=s)
        out = sample_unconditional_ddim(d, s, (4, 4, 1), 20, 0.1, stream(16, "r"))
        assert np.isfinite(out).all()

    def test_moment_agreement_with_ancestral_quick(self):
        # reduced-size preview of the acceptance comparison (means only)
        s = build_linear_schedule(200, 1e-4, 0.05)
        d = GaussianOracleDenoiser(mu0=np.float64(0.4), var0=np.float64(0.5), sched=s)
        anc = sample_unconditional(d, s, (3000,), stream(17, "anc"))
        dd = sample_unconditional_ddim(d, s, (3000,), 20, 0.1, stream(17, "dd"))
        assert abs(dd.mean() - anc.mean()) / abs(anc.mean()) < 0.1


class TestSampleTraceDump:
    def test_dump_writes_snapshots_and_manifest(self, sched, oracle, tmp_path):
        x0 = stream(24, "x").normal((8, 8, 1))
        cond, _ = grid_condition_from(x0)
        cfg = DpiConfig(tau=10, s=1.2, omega=40.0, k=2, steps=50, seed=18)
        tr = SampleTrace(every=10)
        dpi_sample(oracle, FrozenCorrector(k=2), cond, cfg, sched,
                   stream(18, "r"), trace=tr)
        tr.dump(tmp_path / "trace")
        files = sorted((tmp_path / "trace").iterdir())
        names = [f.name for f in files]
        assert "trace.txt" in names
        assert any(n.endswith("_x.pgm") for n in names)
        text = (tmp_path / "trace" / "trace.txt").read_text().splitlines()
        assert text[0] == "t stage w ma_popcount"
        assert len(text) == 1 + sched.T
