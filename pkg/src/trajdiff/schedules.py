"""Noise schedules and closed-form diffusion quantities.

A schedule fixes the per-step corruption strengths ``beta_t`` for
t = 1..T. Everything else is derived:

    alpha_t     = 1 - beta_t
    alpha_bar_t = prod_{s<=t} alpha_s          (alpha_bar_0 = 1 by convention)
    beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t

The marginal of the forward corruption and the posterior of one
denoising step are then available in closed form (``q_sample``,
``posterior_mean``), as is the inversion of the marginal given a noise
estimate (``zhat0_from_eps``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_BAR_FLOOR = 1e-5
BETA_MAX_COSINE = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule arrays, all in double precision.

    Arrays are indexed 0..T-1 for steps t = 1..T; use the accessors to
    address them by step index. Instances are immutable and safe to
    share between workers.
    """

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    beta_tilde: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if self.T < 1:
            raise ValueError(f"step count must be positive, got {self.T}")
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},), got {beta.shape}")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("all beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        # alpha_bar_0 = 1, so beta_tilde_1 = 0.
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "beta_tilde", beta_tilde)

    def _check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step t={t} outside [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t, with the t = 0 convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check_t(t) - 1])

    def beta_tilde_at(self, t: int) -> float:
        return float(self.beta_tilde[self._check_t(t) - 1])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """beta_t linearly interpolated from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if T < 1:
        raise ValueError(f"step count must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(kind="linear", T=T, beta=beta)


def make_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2).

    beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}, clipped to <= 0.999.
    """
    if T < 1:
        raise ValueError(f"step count must be positive, got {T}")
    if s <= 0.0:
        raise ValueError(f"offset s must be positive, got {s}")

    def f(t: float) -> float:
        return math.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0)
    alpha_bar = np.array([f(t) / f0 for t in range(T + 1)])  # includes alpha_bar_0 = 1
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta = np.minimum(beta, BETA_MAX_COSINE)
    return NoiseSchedule(kind="cosine", T=T, beta=beta)


def make_sqrt_schedule(T: int, s: float = 1e-4) -> NoiseSchedule:
    """Sqrt schedule: alpha_bar_t = 1 - sqrt(t/T + s), floored at 1e-5.

    The floor is needed because 1 - sqrt(1 + s) < 0 at t = T.
    """
    if T < 1:
        raise ValueError(f"step count must be positive, got {T}")
    if s <= 0.0:
        raise ValueError(f"offset s must be positive, got {s}")
    t = np.arange(0, T + 1, dtype=np.float64)
    alpha_bar = np.maximum(1.0 - np.sqrt(t / T + s), ALPHA_BAR_FLOOR)
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    # alpha_bar_0 = 1 by convention, not 1 - sqrt(s).
    beta[0] = 1.0 - alpha_bar[1]
    return NoiseSchedule(kind="sqrt", T=T, beta=beta)


SCHEDULE_FACTORIES = {
    "linear": make_linear_schedule,
    "cosine": make_cosine_schedule,
    "sqrt": make_sqrt_schedule,
}


def make_schedule(kind: str, T: int, **kwargs) -> NoiseSchedule:
    """Dispatch on ``kind`` in {linear, cosine, sqrt}."""
    try:
        factory = SCHEDULE_FACTORIES[kind]
    except KeyError:
        raise ValueError(f"unknown schedule kind {kind!r}") from None
    return factory(T, **kwargs)


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """Marginal draw z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps."""
    sched._check_t(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(z_t, z0, t: int, sched: NoiseSchedule):
    """Forward-process posterior mean

    mu_tilde = sqrt(alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t) * z_0
             + sqrt(alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * z_t

    Valid for t >= 2; the t = 1 step is the decode path, not a posterior.
    """
    sched._check_t(t, lo=2)
    z_t = np.asarray(z_t, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    c0, ct = posterior_coefficients(t, sched)
    return c0 * z0 + ct * z_t


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """(coefficient of z_0, coefficient of z_t) of the posterior mean."""
    sched._check_t(t, lo=2)
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    c0 = math.sqrt(ab_prev) * sched.beta_at(t) / (1.0 - ab_t)
    ct = math.sqrt(sched.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct


def zhat0_from_eps(z_t, eps_hat, t: int, sched: NoiseSchedule):
    """Invert the marginal: z_0 = (z_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)."""
    sched._check_t(t)
    ab = sched.alpha_bar_at(t)
    if ab < 1e-12:
        raise ValueError(f"degenerate schedule: alpha_bar_{t} = {ab} below 1e-12")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
