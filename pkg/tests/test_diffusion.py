import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epd.autograd import Tape, Tensor, finite_diff_check
from epd.diffusion import (
    Denoiser,
    DenoiserConfig,
    NumericalError,
    forward_sample,
    forward_step,
    make_schedule,
    pd_loss,
    reverse_step,
    run_reverse,
    schedule_from_betas,
    time_embedding,
    truncated_denoise,
)
from epd.distribution import from_unconstrained
from epd.optim import Adam
from epd.rng import make_rng


def tiny_denoiser(seed=0, g_dim=4):
    cfg = DenoiserConfig(t_future=2, g_dim=g_dim, d_model=8, heads=2, layers=1, ffn=8, time_dim=8)
    return Denoiser(make_rng(seed, "denoiser"), cfg)


class PlantedNoise:
    """Stands in for the network and returns a fixed noise prediction."""

    def __init__(self, eps):
        self.eps = eps
        self.invocations = 0

    def predict_noise(self, d, t, g):
        self.invocations += d.shape[0]
        return Tensor(self.eps)


class TestSchedule:
    def test_terminal_noise(self):
        assert make_schedule(100, 1e-4, 0.2).alpha_bars[-1] < 1e-3

    def test_two_step(self):
        s = make_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 300), st.floats(1e-6, 0.4), st.floats(0.01, 0.5))
    def test_alpha_bar_decreasing(self, T, lo, span):
        s = make_schedule(T, lo, min(lo + span, 0.99))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(np.diff(s.betas) > 0)

    @pytest.mark.parametrize("args", [(1, 1e-4, 0.2), (100, 0.0, 0.2), (100, 0.3, 0.2), (100, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_schedule(*args)

    def test_alpha_bar_zero_is_one(self):
        assert make_schedule().alpha_bar(0) == 1.0

    def test_json_round_trip(self):
        s = make_schedule(50, 1e-3, 0.1)
        back = type(s).from_json(s.to_json())
        np.testing.assert_array_equal(back.alpha_bars, s.alpha_bars)


class TestForward:
    def test_identity_prefix(self):
        s = schedule_from_betas([0.0, 0.0, 0.1])
        d0 = np.arange(6.0)
        np.testing.assert_array_equal(forward_sample(d0, 2, np.ones(6), s), d0)

    def test_zero_start(self):
        s = make_schedule()
        eps = np.random.default_rng(0).normal(size=60)
        np.testing.assert_array_equal(forward_sample(np.zeros(60), 37, eps, s), np.sqrt(1 - s.alpha_bars[36]) * eps)

    def test_per_row_steps(self):
        s = make_schedule()
        d0, eps = np.ones((2, 3)), np.zeros((2, 3))
        out = forward_sample(d0, np.array([1, 50]), eps, s)
        np.testing.assert_allclose(out[:, 0], np.sqrt(s.alpha_bars[[0, 49]]))

    @pytest.mark.parametrize("t", [1, 10, 50, 100])
    def test_recursive_matches_closed_form(self, t):
        s = make_schedule()
        rng = make_rng(0, "marginal", t)
        d0 = np.linspace(-2.0, 2.0, 60)
        d = np.broadcast_to(d0, (10_000, 60)).copy()
        for k in range(1, t + 1):
            d = forward_step(d, k, rng.standard_normal(d.shape), s)
        ab = s.alpha_bars[t - 1]
        resid = d - np.sqrt(ab) * d0
        # coordinates are i.i.d., so the pooled estimate carries the stated tolerance
        assert abs(resid.mean()) < 0.02
        assert abs(resid.var() - (1 - ab)) < 0.03
        # and no single coordinate strays beyond five standard errors
        n = d.shape[0]
        assert np.all(np.abs(resid.mean(axis=0)) < 5 * np.sqrt((1 - ab) / n))
        assert np.all(np.abs(resid.var(axis=0) - (1 - ab)) < 5 * (1 - ab) * np.sqrt(2 / n))


class TestDenoiser:
    def test_zero_network(self):
        m = Denoiser(make_rng(0, "denoiser"))
        m.zero_()
        out = m.predict_noise(np.ones((3, 60)), 7, np.ones((3, 256)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 60)))

    @pytest.mark.parametrize("t", [1, 5, 100])
    def test_output_shape(self, t):
        m = Denoiser(make_rng(0, "denoiser"))
        assert m.predict_noise(np.zeros((2, 60)), t, np.zeros((2, 256))).shape == (2, 60)

    def test_counts_invocations(self):
        m = tiny_denoiser()
        m.predict_noise(np.zeros((3, 10)), 1, np.zeros((3, 4)))
        m.predict_noise(np.zeros((1, 10)), 2, np.zeros((1, 4)))
        assert m.invocations == 4
        m.reset_counter()
        assert m.invocations == 0

    def test_time_embedding(self):
        e = time_embedding([0, 3], 8)
        np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
        assert e.shape == (2, 8)

    def test_gradients(self):
        m = tiny_denoiser(1)
        rng = np.random.default_rng(1)
        d, g, eps = rng.normal(size=(3, 10)), rng.normal(size=(3, 4)), rng.normal(size=(3, 10))
        t = np.array([1, 4, 9])
        report = finite_diff_check(lambda: ((m.predict_noise(d, t, g) - eps) ** 2).mean(), m.params, tolerance=1e-4)
        assert report.passed, report.errors

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            Denoiser(make_rng(0, "d"), DenoiserConfig(d_model=10, heads=4))


class TestReverse:
    def test_single_step_inversion(self):
        s = schedule_from_betas([0.3])
        rng = np.random.default_rng(0)
        d0, eps = rng.normal(size=(4, 60)), rng.normal(size=(4, 60))
        d1 = forward_sample(d0, 1, eps, s)
        out = reverse_step(d1, 0, None, None, s, None, eps_hat=eps)
        assert np.max(np.abs(out.data - d0)) < 1e-10

    def test_planted_noise_through_run_reverse(self):
        s = schedule_from_betas([0.05])
        d0, eps = np.ones((1, 10)), np.full((1, 10), 0.5)
        out = run_reverse(forward_sample(d0, 1, eps, s), 1, None, PlantedNoise(eps), s, None)
        assert np.max(np.abs(out.data - d0)) < 1e-10

    def test_zero_network_rescales(self):
        s = make_schedule()
        m = tiny_denoiser()
        m.zero_()
        d = np.random.default_rng(1).normal(size=(2, 10))
        out = reverse_step(d, 9, np.zeros((2, 4)), m, s, None)
        np.testing.assert_allclose(out.data, d / np.sqrt(s.alphas[9]), rtol=1e-15)

    def test_noise_term(self):
        s = make_schedule()
        d, noise = np.zeros((1, 10)), np.ones((1, 10))
        out = reverse_step(d, 4, None, PlantedNoise(np.zeros((1, 10))), s, None, noise=noise)
        np.testing.assert_allclose(out.data, np.sqrt(s.betas[4]))

    def test_same_seed_same_output(self):
        s = make_schedule()
        m = tiny_denoiser()
        g = np.ones((2, 4))
        a = run_reverse(np.ones((2, 10)), 5, g, m, s, make_rng(3, "rev"))
        b = run_reverse(np.ones((2, 10)), 5, g, m, s, make_rng(3, "rev"))
        assert a.data.tobytes() == b.data.tobytes()

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            reverse_step(np.zeros((1, 10)), 100, None, PlantedNoise(np.zeros((1, 10))), make_schedule(), None)

    def test_non_finite_state_names_step(self):
        s = make_schedule()
        with pytest.raises(NumericalError, match="step 2"):
            run_reverse(np.zeros((1, 10)), 3, None, PlantedNoise(np.full((1, 10), np.inf)), s, None)

    def test_truncation_zero_is_identity(self):
        plan = np.random.default_rng(2).normal(size=(1, 60))
        m = PlantedNoise(np.zeros((1, 60)))
        out = truncated_denoise(plan, None, m, make_schedule(), steps=0)
        np.testing.assert_array_equal(from_unconstrained(out.data[0]).mu, from_unconstrained(plan[0]).mu)
        assert m.invocations == 0

    def test_truncation_counts(self):
        m = tiny_denoiser()
        truncated_denoise(np.zeros((3, 10)), np.zeros((3, 4)), m, make_schedule(), steps=5, rng=make_rng(0, "t"))
        assert m.invocations == 15

    def test_truncation_range(self):
        with pytest.raises(ValueError):
            truncated_denoise(np.zeros((1, 10)), None, PlantedNoise(0), make_schedule(), steps=101)


class TestPDLoss:
    def test_oracle_network(self):
        s = make_schedule()
        rng = make_rng(0, "pd")
        d0 = np.random.default_rng(0).normal(size=(8, 10))
        eps = np.random.default_rng(1).normal(size=(8, 10))
        assert pd_loss(d0, None, PlantedNoise(eps), s, rng, eps=eps).item() == 0.0

    def test_zero_network_expectation(self):
        m = tiny_denoiser()
        m.zero_()
        d0 = np.zeros((1000, 10))
        loss = pd_loss(d0, np.zeros((1000, 4)), m, make_schedule(), make_rng(0, "pdzero")).item()
        assert loss == pytest.approx(1.0, abs=0.05)

    def test_overfit_ten_windows(self):
        rng = np.random.default_rng(3)
        d0 = rng.normal(size=(10, 10))
        g = rng.normal(size=(10, 4))
        m = tiny_denoiser(2)
        s = make_schedule()
        opt = Adam(m.params, lr=2e-3)
        stream = make_rng(0, "pdfit")
        losses = []
        for _ in range(5000):
            with Tape() as tape:
                loss = pd_loss(d0, g, m, s, stream)
            opt.step(dict(zip(m.params, tape.backward(loss, list(m.params.values())))))
            losses.append(loss.item())
        assert np.mean(losses[-500:]) < 0.8 * np.mean(losses[:500])
