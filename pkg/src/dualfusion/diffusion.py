"""Variance schedules, forward/reverse diffusion steps, the training loss,
and an analytic Gaussian noise predictor used to validate the samplers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualfusion.tensor import Rng, ShapeError, Tensor, as_tensor, tmean, mul, sub


@dataclass
class Schedule:
    """Per-step noise constants, 1-based in t; alpha_bar(0) == 1 by convention."""

    timesteps: int
    betas: np.ndarray            # beta_t, t = 1..T
    alphas: np.ndarray           # 1 - beta_t
    alpha_bars: np.ndarray       # length T+1, index 0 holds 1.0
    posterior_vars: np.ndarray   # beta_tilde_t, t = 1..T

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t)]

    def posterior_var(self, t):
        return self.posterior_vars[np.asarray(t) - 1]

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ValueError(f"step {t} outside 1..{self.timesteps}")


def linear_schedule(timesteps, beta_start=1e-4, beta_end=0.02):
    """Betas linearly spaced over [beta_start, beta_end], endpoints included."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    posterior_vars = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas
    return Schedule(timesteps, betas, alphas, alpha_bars, posterior_vars)


def _per_sample(coef, x):
    """Broadcast a scalar or per-sample coefficient over x's trailing axes."""
    c = np.asarray(coef, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (x.ndim - 1))


def q_sample(x0, t, eps, sched):
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    a = _per_sample(np.sqrt(ab), x0.data)
    b = _per_sample(np.sqrt(1.0 - ab), x0.data)
    return Tensor(a * x0.data + b * eps.data)


def predict_x0(x_t, t, eps_hat, sched):
    """Invert q_sample for a given noise estimate."""
    x_t, eps_hat = as_tensor(x_t), as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"predict_x0: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    ab = sched.alpha_bar(t)
    a = _per_sample(np.sqrt(ab), x_t.data)
    b = _per_sample(np.sqrt(1.0 - ab), x_t.data)
    return Tensor((x_t.data - b * eps_hat.data) / a)


def mu_theta(x_t, t, eps_hat, sched):
    """Reverse-step mean: (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t)."""
    x_t, eps_hat = as_tensor(x_t), as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"mu_theta: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    sched.check_step(t)
    al = sched.alpha(t)
    ab = sched.alpha_bar(t)
    c = _per_sample((1.0 - al) / np.sqrt(1.0 - ab), x_t.data)
    inv = _per_sample(1.0 / np.sqrt(al), x_t.data)
    return Tensor(inv * (x_t.data - c * eps_hat.data))


def ddpm_step(x_t, t, eps_hat, sched, rng, variance="beta_tilde"):
    """Stochastic reverse transition; the final t=1 step adds no noise."""
    if variance not in ("beta", "beta_tilde"):
        raise ValueError(f"unknown variance choice {variance!r}")
    sched.check_step(t)
    mu = mu_theta(x_t, t, eps_hat, sched)
    if np.all(np.asarray(t) == 1):
        return mu
    var = sched.beta(t) if variance == "beta" else sched.posterior_var(t)
    sigma = _per_sample(np.sqrt(var), mu.data)
    # t == 1 entries stay noiseless even in mixed-step batches
    sigma = sigma * _per_sample(np.asarray(t) != 1, mu.data)
    xi = rng.normal(mu.data.shape)
    return Tensor(mu.data + sigma * xi)


def ddim_step(x_t, t, t_next, eps_hat, sched):
    """Deterministic reverse update; t_next = 0 lands on the x0 estimate."""
    t_a, tn_a = np.asarray(t), np.asarray(t_next)
    if np.any(tn_a < 0) or np.any(tn_a >= t_a) or np.any(t_a > sched.timesteps):
        raise ValueError(f"ddim_step needs 0 <= t_next < t <= T, got t={t}, t_next={t_next}")
    x0 = predict_x0(x_t, t, eps_hat, sched)
    ab_next = sched.alpha_bar(t_next)
    a = _per_sample(np.sqrt(ab_next), x0.data)
    b = _per_sample(np.sqrt(1.0 - ab_next), x0.data)
    return Tensor(a * x0.data + b * as_tensor(eps_hat).data)


def ddim_timesteps(timesteps, steps, spacing="even"):
    """Step indices from T down to 0, inclusive at both ends.

    "even" spaces indices uniformly in t. "quadratic" concentrates them near
    t = 0, which cuts the per-hop discretization bias of the deterministic
    sampler at low noise levels.
    """
    if not (1 <= steps <= timesteps):
        raise ValueError(f"need 1 <= steps <= {timesteps}, got {steps}")
    if spacing == "even":
        asc = np.round(np.linspace(0, timesteps, steps + 1)).astype(np.int64)
    elif spacing == "quadratic":
        asc = np.round(timesteps * (np.arange(steps + 1) / steps) ** 2).astype(np.int64)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    for i in range(1, len(asc)):  # rounding may collide; keep indices strictly increasing
        asc[i] = max(asc[i], asc[i - 1] + 1)
    return [int(v) for v in asc[::-1]]


def simple_loss(eps, eps_hat):
    """Mean squared error over all elements; differentiable in both inputs."""
    eps, eps_hat = as_tensor(eps), as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"simple_loss: {eps.shape} vs {eps_hat.shape}")
    d = sub(eps_hat, eps)
    return tmean(mul(d, d))


@dataclass
class GaussianDataSpec:
    """Scalar Gaussian data model used to validate samplers end to end."""

    mu0: float = 0.0
    sigma0: float = 1.0

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError(f"sigma0 must be > 0, got {self.sigma0}")


def gaussian_oracle_eps(x_t, t, spec, sched):
    """Posterior-mean noise prediction for Gaussian data N(mu0, sigma0^2).

    With x_t = sqrt(abar) x0 + sqrt(1-abar) eps and Gaussian x0, (eps, x_t)
    are jointly Gaussian with cov sqrt(1-abar) and var(x_t) = abar sigma0^2
    + 1 - abar, so

        E[eps | x_t] = sqrt(1-abar) (x_t - sqrt(abar) mu0)
                       / (abar sigma0^2 + 1 - abar)
    """
    x_t = as_tensor(x_t)
    ab = sched.alpha_bar(t)
    num = _per_sample(np.sqrt(1.0 - ab), x_t.data)
    den = _per_sample(ab * spec.sigma0 ** 2 + 1.0 - ab, x_t.data)
    mean_shift = _per_sample(np.sqrt(ab) * spec.mu0, x_t.data)
    return Tensor(num * (x_t.data - mean_shift) / den)
