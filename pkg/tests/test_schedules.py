import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    alpha_bar_extended_precision,
    compositional_forward,
    regression_with_intercept,
)
from trajdiff.schedules import (
    NoiseSchedule,
    make_cosine_schedule,
    make_linear_schedule,
    make_schedule,
    make_sqrt_schedule,
    posterior_coefficients,
    posterior_mean,
    q_sample,
    zhat0_from_eps,
)


class TestLinearSchedule:
    def test_single_step(self):
        s = make_linear_schedule(1, 0.1, 0.1)
        assert s.beta.tolist() == [0.1]
        assert s.alpha_bar_at(1) == pytest.approx(0.9)

    def test_two_steps(self):
        s = make_linear_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha_bar, [0.9, 0.72])

    def test_long_schedule_matches_extended_precision(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        expected = alpha_bar_extended_precision(np.linspace(1e-4, 0.02, 1000))
        assert s.alpha_bar_at(1000) == pytest.approx(expected, rel=1e-10)
        assert s.alpha_bar_at(1000) == pytest.approx(4.0e-5, rel=0.02)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_linear_schedule(0, 0.1, 0.2)
        with pytest.raises(ValueError):
            make_linear_schedule(10, 0.0, 0.2)
        with pytest.raises(ValueError):
            make_linear_schedule(10, 0.3, 0.2)
        with pytest.raises(ValueError):
            make_linear_schedule(10, 0.1, 1.0)


class TestCosineSchedule:
    def test_alpha_bar_zero_convention(self):
        s = make_cosine_schedule(10)
        assert s.alpha_bar_at(0) == 1.0

    def test_midpoint_matches_direct_evaluation(self):
        T, off = 1000, 0.008
        s = make_cosine_schedule(T, off)

        def f(t):
            return math.cos((t / T + off) / (1 + off) * math.pi / 2) ** 2

        assert s.alpha_bar_at(500) == pytest.approx(f(500) / f(0), rel=1e-10)
        assert s.alpha_bar_at(500) == pytest.approx(0.49, abs=0.01)

    def test_beta_clipped(self):
        s = make_cosine_schedule(1000)
        assert np.all(s.beta <= 0.999)
        assert np.all(s.beta > 0)

    def test_rejects_nonpositive_offset(self):
        with pytest.raises(ValueError):
            make_cosine_schedule(10, 0.0)


class TestSqrtSchedule:
    def test_small_t_limit(self):
        s = make_sqrt_schedule(100, 1e-4)
        assert s.alpha_bar_at(1) == pytest.approx(1 - math.sqrt(1 / 100 + 1e-4), rel=1e-12)

    def test_quarter_point(self):
        s = make_sqrt_schedule(100, 1e-4)
        assert s.alpha_bar_at(25) == pytest.approx(1 - math.sqrt(0.2501), rel=1e-10)

    def test_final_step_floored(self):
        s = make_sqrt_schedule(100)
        # The floor applies to the generating formula; the cumulative
        # product may sit a few ulps below it.
        assert s.alpha_bar_at(100) >= 1e-5 * (1 - 1e-9)

    def test_monotone(self):
        s = make_sqrt_schedule(1000)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_rejects_bad_T(self):
        with pytest.raises(ValueError):
            make_sqrt_schedule(0)


@given(
    T=st.integers(min_value=1, max_value=200),
    lo=st.floats(min_value=1e-5, max_value=0.4),
    hi=st.floats(min_value=1e-5, max_value=0.4),
)
@settings(max_examples=40, deadline=None)
def test_constructor_invariants(T, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    for s in (
        make_linear_schedule(T, lo, hi),
        make_cosine_schedule(T),
        make_sqrt_schedule(T),
    ):
        assert np.all(s.beta > 0) and np.all(s.beta < 1)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert 0 < s.alpha_bar[-1] <= s.alpha_bar[0] < 1
        if T > 1:
            assert s.alpha_bar[-1] < s.alpha_bar[0]
        assert s.beta_tilde_at(1) == 0.0


def test_make_schedule_dispatch():
    assert make_schedule("linear", 5).kind == "linear"
    assert make_schedule("cosine", 5).kind == "cosine"
    assert make_schedule("sqrt", 5).kind == "sqrt"
    with pytest.raises(ValueError):
        make_schedule("quadratic", 5)


class TestQSample:
    def setup_method(self):
        self.sched = NoiseSchedule(kind="linear", T=2, beta=np.array([0.1, 0.2]))

    def test_zero_noise(self):
        z0 = np.array([[1.0, -2.0]])
        out = q_sample(z0, 2, np.zeros_like(z0), self.sched)
        assert np.allclose(out, math.sqrt(0.72) * z0)

    def test_scalar_example(self):
        # alpha_bar = 0.72: sqrt(0.72) + sqrt(0.28) = 1.3777
        out = q_sample(np.array(1.0), 2, np.array(1.0), self.sched)
        assert float(out) == pytest.approx(math.sqrt(0.72) + math.sqrt(0.28), rel=1e-12)
        assert float(out) == pytest.approx(1.3777, abs=1e-4)

    def test_identity_limit(self):
        s = make_linear_schedule(1, 1e-9, 1e-9)
        z0 = np.array([1.0, 2.0])
        out = q_sample(z0, 1, np.zeros_like(z0), s)
        assert np.allclose(out, z0, atol=1e-8)

    def test_rejects_bad_t_and_shape(self):
        with pytest.raises(ValueError):
            q_sample(np.zeros(2), 3, np.zeros(2), self.sched)
        with pytest.raises(ValueError):
            q_sample(np.zeros(2), 1, np.zeros(3), self.sched)


class TestPosteriorMean:
    def setup_method(self):
        self.sched = NoiseSchedule(kind="linear", T=2, beta=np.array([0.1, 0.2]))

    def test_zero_inputs(self):
        assert np.allclose(posterior_mean(np.zeros(3), np.zeros(3), 2, self.sched), 0.0)

    def test_hand_computed_example(self):
        out = posterior_mean(np.array(1.0), np.array(1.0), 2, self.sched)
        expected = (math.sqrt(0.9) * 0.2 + math.sqrt(0.8) * 0.1) / 0.28
        assert float(out) == pytest.approx(expected, rel=1e-12)
        assert float(out) == pytest.approx(0.99707, abs=1e-5)

    def test_coefficients_match_hand_arithmetic(self, rng):
        for _ in range(3):
            T = int(rng.integers(3, 30))
            beta = rng.uniform(0.01, 0.3, size=T)
            sched = NoiseSchedule(kind="linear", T=T, beta=beta)
            t = int(rng.integers(2, T + 1))
            c0, ct = posterior_coefficients(t, sched)
            ab = np.cumprod(1 - beta)
            c0_hand = math.sqrt(ab[t - 2]) * beta[t - 1] / (1 - ab[t - 1])
            ct_hand = math.sqrt(1 - beta[t - 1]) * (1 - ab[t - 2]) / (1 - ab[t - 1])
            assert c0 == pytest.approx(c0_hand, rel=1e-12)
            assert ct == pytest.approx(ct_hand, rel=1e-12)

    def test_rejects_t_one(self):
        with pytest.raises(ValueError):
            posterior_mean(np.zeros(2), np.zeros(2), 1, self.sched)


class TestZhat0FromEps:
    def setup_method(self):
        self.sched = NoiseSchedule(kind="linear", T=2, beta=np.array([0.1, 0.2]))

    def test_zero_eps(self):
        z = np.array([1.0, 2.0])
        assert np.allclose(zhat0_from_eps(z, np.zeros(2), 2, self.sched), z / math.sqrt(0.72))

    def test_roundtrip(self, rng):
        sched = make_cosine_schedule(50)
        z0 = rng.standard_normal((8, 4))
        for t in (1, 7, 50):
            eps = rng.standard_normal((8, 4))
            z_t = q_sample(z0, t, eps, sched)
            back = zhat0_from_eps(z_t, eps, t, sched)
            assert np.max(np.abs(back - z0) / np.maximum(np.abs(z0), 1e-3)) < 1e-10

    def test_inverse_of_marginal_example(self):
        z_t = q_sample(np.array(1.0), 2, np.array(1.0), self.sched)
        back = zhat0_from_eps(z_t, np.array(1.0), 2, self.sched)
        assert float(back) == pytest.approx(1.0, rel=1e-12)

    def test_degenerate_schedule_rejected(self):
        beta = np.full(2000, 0.05)
        sched = NoiseSchedule(kind="linear", T=2000, beta=beta)
        with pytest.raises(ValueError, match="degenerate"):
            zhat0_from_eps(np.zeros(2), np.zeros(2), 2000, sched)


class TestMonteCarloConsistency:
    """Compositional single-step kernels vs the closed-form marginal/posterior."""

    def test_marginal_mean_and_variance(self):
        rng = np.random.default_rng(7)
        sched = make_linear_schedule(40, 0.01, 0.05)
        t, z0, n = 10, 1.5, 120_000
        z_t = compositional_forward(z0, sched.beta[:t], rng, n)
        ab = sched.alpha_bar_at(t)
        mean, var = math.sqrt(ab) * z0, 1 - ab
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2 / (n - 1))
        assert abs(z_t.mean() - mean) < 3 * se_mean
        assert abs(z_t.var() - var) < 3 * se_var

    def test_posterior_coefficient_recovery(self):
        rng = np.random.default_rng(11)
        sched = make_linear_schedule(40, 0.01, 0.05)
        t, z0, n = 2, 1.5, 300_000
        z_prev = compositional_forward(z0, sched.beta[: t - 1], rng, n)
        b_t = sched.beta_at(t)
        z_t = np.sqrt(1 - b_t) * z_prev + np.sqrt(b_t) * rng.standard_normal(n)
        slope, intercept = regression_with_intercept(z_t, z_prev)
        c0, ct = posterior_coefficients(t, sched)
        assert abs(slope - ct) / ct < 0.01
        assert abs(intercept - c0 * z0) / (c0 * z0) < 0.01
