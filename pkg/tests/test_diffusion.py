import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualfusion import diffusion as D
from dualfusion.tensor import Rng, ShapeError, Tensor

from fdcheck import fd_grad, max_rel_err


class TestSchedule:
    def test_single_step(self):
        s = D.linear_schedule(1, 0.1, 0.1)
        assert np.allclose(s.betas, [0.1])
        assert np.isclose(s.alpha_bar(1), 0.9)
        assert s.posterior_var(1) == 0.0

    def test_hand_product_t4(self):
        s = D.linear_schedule(4, 0.1, 0.4)
        assert np.allclose(s.betas, [0.1, 0.2, 0.3, 0.4])
        assert np.allclose(s.alpha_bars[1:], [0.9, 0.72, 0.504, 0.3024])

    def test_default_abar_final_matches_cumprod_oracle(self):
        s = D.linear_schedule(1000)
        # independent cumulative product in log space
        betas = np.linspace(1e-4, 0.02, 1000)
        expected = np.exp(np.sum(np.log1p(-betas)))
        assert np.isclose(s.alpha_bar(1000), expected, rtol=1e-12)

    @given(st.integers(1, 200))
    @settings(max_examples=30, deadline=None)
    def test_invariants(self, timesteps):
        s = D.linear_schedule(timesteps)
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        assert np.all(np.diff(s.betas) >= 0)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == 1.0
        assert s.posterior_var(1) == 0.0
        assert np.all(s.posterior_vars >= 0)

    def test_bounds_rejected(self):
        with pytest.raises(ValueError):
            D.linear_schedule(0)
        with pytest.raises(ValueError):
            D.linear_schedule(10, 0.2, 0.1)
        with pytest.raises(ValueError):
            D.linear_schedule(10, 0.0, 0.1)


class TestForward:
    def test_zero_noise(self):
        s = D.linear_schedule(10)
        x0 = Tensor([1.0, -2.0])
        out = D.q_sample(x0, 3, Tensor([0.0, 0.0]), s)
        assert np.allclose(out.data, np.sqrt(s.alpha_bar(3)) * x0.data)

    def test_abar_one_identity(self):
        s = D.linear_schedule(5)
        s.alpha_bars = s.alpha_bars.copy()
        s.alpha_bars[2] = 1.0  # injected
        x0 = Tensor([0.5, 0.25])
        out = D.q_sample(x0, 2, Tensor([1.0, 1.0]), s)
        assert np.allclose(out.data, x0.data)

    def test_monte_carlo_moments(self):
        s = D.linear_schedule(100)
        rng = Rng(3)
        t = 60
        x0 = 1.5
        n = 10_000
        draws = np.array(
            [D.q_sample(Tensor([x0]), t, Tensor([e]), s).item() for e in rng.normal(n)]
        )
        mean_target = np.sqrt(s.alpha_bar(t)) * x0
        var_target = 1.0 - s.alpha_bar(t)
        se_mean = np.sqrt(var_target / n)
        assert abs(draws.mean() - mean_target) < 3 * se_mean
        assert abs(draws.var() - var_target) < 3 * var_target * np.sqrt(2.0 / n)

    def test_round_trip_identity(self):
        s = D.linear_schedule(50)
        rng = Rng(5)
        x0 = Tensor(rng.normal((4, 4)))
        worst = 0.0
        for t in range(1, 51):
            eps = Tensor(rng.normal((4, 4)))
            xt = D.q_sample(x0, t, eps, s)
            back = D.predict_x0(xt, t, eps, s)
            worst = max(worst, np.max(np.abs(back.data - x0.data)))
        assert worst < 1e-8

    def test_predict_x0_zero_eps(self):
        s = D.linear_schedule(10)
        xt = Tensor([2.0])
        out = D.predict_x0(xt, 4, Tensor([0.0]), s)
        assert np.allclose(out.data, xt.data / np.sqrt(s.alpha_bar(4)))

    def test_step_range_rejected(self):
        s = D.linear_schedule(10)
        with pytest.raises(ValueError):
            D.q_sample(Tensor([1.0]), 11, Tensor([0.0]), s)
        with pytest.raises(ValueError):
            D.q_sample(Tensor([1.0]), 0, Tensor([0.0]), s)


class TestReverseMean:
    def test_zero_eps(self):
        s = D.linear_schedule(10)
        out = D.mu_theta(Tensor([1.0]), 5, Tensor([0.0]), s)
        assert np.allclose(out.data, 1.0 / np.sqrt(s.alpha(5)))

    def test_alpha_one_identity(self):
        s = D.linear_schedule(10)
        s.alphas = s.alphas.copy()
        s.alphas[4] = 1.0  # injected beta -> 0 limit
        out = D.mu_theta(Tensor([1.0]), 5, Tensor([0.7]), s)
        assert np.allclose(out.data, 1.0)

    def test_hand_value_t2(self):
        s = D.linear_schedule(4, 0.1, 0.4)
        # (1/sqrt(0.8)) * (1 - (0.2/sqrt(1-0.72)) * 0.5)
        expected = (1.0 - 0.2 / np.sqrt(1.0 - 0.72) * 0.5) / np.sqrt(0.8)
        out = D.mu_theta(Tensor([1.0]), 2, Tensor([0.5]), s)
        assert np.isclose(out.item(), expected)


class TestSteps:
    def test_ddpm_final_step_noiseless(self):
        s = D.linear_schedule(10)
        x = Tensor([1.0, 2.0])
        eps = Tensor([0.1, -0.2])
        for variance in ("beta", "beta_tilde"):
            out = D.ddpm_step(x, 1, eps, s, Rng(0), variance)
            assert np.array_equal(out.data, D.mu_theta(x, 1, eps, s).data)

    def test_ddim_t_next_zero_is_predict_x0(self):
        s = D.linear_schedule(10)
        x = Tensor([0.4, -1.1])
        eps = Tensor([0.2, 0.3])
        out = D.ddim_step(x, 7, 0, eps, s)
        assert np.array_equal(out.data, D.predict_x0(x, 7, eps, s).data)

    def test_ddim_deterministic(self):
        s = D.linear_schedule(10)
        x = Tensor([0.4, -1.1])
        eps = Tensor([0.2, 0.3])
        a = D.ddim_step(x, 7, 3, eps, s)
        b = D.ddim_step(x, 7, 3, eps, s)
        assert np.array_equal(a.data, b.data)

    def test_ddim_ordering_rejected(self):
        s = D.linear_schedule(10)
        x, eps = Tensor([1.0]), Tensor([0.0])
        with pytest.raises(ValueError):
            D.ddim_step(x, 3, 3, eps, s)
        with pytest.raises(ValueError):
            D.ddim_step(x, 3, 5, eps, s)

    def test_timestep_lists(self):
        ts = D.ddim_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 0
        assert len(ts) == 51
        assert all(a > b for a, b in zip(ts, ts[1:]))
        tq = D.ddim_timesteps(1000, 50, spacing="quadratic")
        assert tq[0] == 1000 and tq[-1] == 0 and len(tq) == 51
        with pytest.raises(ValueError):
            D.ddim_timesteps(10, 11)


class TestLoss:
    def test_zero_when_equal(self):
        e = Tensor([0.3, -0.7])
        assert D.simple_loss(e, e).item() == 0.0

    def test_unit_offset(self):
        assert D.simple_loss(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0

    def test_gradient_matches_formula_and_fd(self):
        eps = np.array([0.1, -0.4, 0.2])
        eps_hat = np.array([0.5, 0.0, -0.3])
        t = Tensor(eps_hat, requires_grad=True)
        D.simple_loss(Tensor(eps), t).backward()
        assert np.allclose(t.grad, 2.0 * (eps_hat - eps) / eps.size)
        num = fd_grad(lambda v: D.simple_loss(Tensor(eps), Tensor(v)).item(), eps_hat.copy())
        assert max_rel_err(t.grad, num) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            D.simple_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestGaussianOracle:
    def test_point_mass_limit(self):
        s = D.linear_schedule(100)
        spec = D.GaussianDataSpec(2.0, 1e-9)
        t = 40
        xt = Tensor([0.3])
        ab = s.alpha_bar(t)
        exact = (0.3 - np.sqrt(ab) * 2.0) / np.sqrt(1.0 - ab)
        out = D.gaussian_oracle_eps(xt, t, spec, s)
        assert np.isclose(out.item(), exact, rtol=1e-6)

    def test_symmetry_zero(self):
        s = D.linear_schedule(100)
        spec = D.GaussianDataSpec(2.0, 0.5)
        t = 17
        xt = Tensor([np.sqrt(s.alpha_bar(t)) * 2.0])
        assert abs(D.gaussian_oracle_eps(xt, t, spec, s).item()) < 1e-12

    def test_least_squares_fit_recovers_coefficients(self):
        # fit eps ~ a x_t + b over Monte-Carlo draws; the oracle is the
        # posterior mean, so regression must recover its affine coefficients
        s = D.linear_schedule(100)
        spec = D.GaussianDataSpec(2.0, 0.5)
        t = 55
        rng = Rng(21)
        n = 100_000
        x0 = spec.mu0 + spec.sigma0 * rng.normal(n)
        eps = rng.normal(n)
        ab = s.alpha_bar(t)
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        coef = np.polyfit(xt, eps, 1)
        a_fit, b_fit = coef[0], coef[1]
        a_ref = np.sqrt(1.0 - ab) / (ab * spec.sigma0 ** 2 + 1.0 - ab)
        b_ref = -a_ref * np.sqrt(ab) * spec.mu0
        assert abs(a_fit - a_ref) / abs(a_ref) < 0.02
        assert abs(b_fit - b_ref) / abs(b_ref) < 0.02

    def test_invalid_sigma_rejected(self):
        with pytest.raises(ValueError):
            D.GaussianDataSpec(0.0, -1.0)


class TestOracleTransportSmoke:
    """Full acceptance-scale transport lives in the acceptance suite; this
    guards the samplers at reduced size so regressions surface fast."""

    def test_ddpm_transport_short(self):
        s = D.linear_schedule(1000)
        spec = D.GaussianDataSpec(2.0, 0.5)
        rng = Rng(31)
        n = 4000
        x = Tensor(rng.normal((n,)))
        for t in range(1000, 0, -1):
            x = D.ddpm_step(x, t, D.gaussian_oracle_eps(x, t, spec, s), s, rng)
        assert abs(x.data.mean() - 2.0) < 3 * 0.5 / np.sqrt(n)
        assert abs(x.data.var() - 0.25) < 0.1 * 0.25

    def test_ddim_even_spacing_within_coarse_band(self):
        # even 50-step spacing carries ~11% deterministic contraction; guard
        # against anything worse
        s = D.linear_schedule(1000)
        spec = D.GaussianDataSpec(2.0, 0.5)
        rng = Rng(33)
        x = Tensor(rng.normal((4000,)))
        ts = D.ddim_timesteps(1000, 50)
        for a, b in zip(ts[:-1], ts[1:]):
            x = D.ddim_step(x, a, b, D.gaussian_oracle_eps(x, a, spec, s), s)
        assert abs(x.data.mean() - 2.0) < 0.05
        assert abs(x.data.var() - 0.25) < 0.15 * 0.25
