"""Closed-form diffusion quantities.

Steps are 1-based (``t`` in ``1..T``) with the convention ``alpha_bar(0) == 1``.
All coefficients are computed in float64 and cast to the dtype of the image
arguments, so float32 model tensors stay float32.

Functions accept either a scalar step or an integer array of per-item steps
(length = batch size); in the latter case coefficients broadcast over the
trailing H, W, C axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from casdm.netcore.autodiff import Tensor

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        ab = np.cumprod(1.0 - betas)
        ext = np.concatenate([[1.0], ab])
        ext.setflags(write=False)
        object.__setattr__(self, "_ab_ext", ext)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar_1 .. alpha_bar_T."""
        return self._ab_ext[1:]

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at 0-or-more steps, with alpha_bar(0) = 1."""
        return self._ab_ext[np.asarray(t)]

    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t) -> np.ndarray:
        return 1.0 - self.beta(t)

    def check_step(self, t, lo: int = 1) -> None:
        arr = np.asarray(t)
        if arr.size and (arr.min() < lo or arr.max() > self.T):
            raise ValueError(f"step out of range [{lo}, {self.T}]: {arr.min()}..{arr.max()}")


def cosine_alpha_bar_fn(t, T: int, s: float = COSINE_OFFSET):
    """The unnormalised cosine curve f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)."""
    return np.cos(((np.asarray(t, dtype=np.float64) / T + s) / (1 + s)) * math.pi / 2) ** 2


def make_schedule(
    kind: Literal["cosine", "linear"],
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if kind == "cosine":
        f = cosine_alpha_bar_fn(np.arange(T + 1), T)
        betas = np.minimum(1.0 - f[1:] / f[:-1], MAX_BETA)
    elif kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas=betas, kind=kind)


# ---------------------------------------------------------------------------
# coefficient helpers


def _dtype_of(x):
    d = x.dtype if isinstance(x, (np.ndarray, Tensor)) else np.asarray(x).dtype
    return d if np.issubdtype(d, np.floating) else np.float64


def _bcast(coef: np.ndarray, x) -> np.ndarray:
    """Shape per-item coefficients for broadcasting against NHWC ``x``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef.astype(_dtype_of(x))
    ndim = x.ndim if hasattr(x, "ndim") else np.ndim(x)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim)).astype(_dtype_of(x))


def _check_same_shape(a, b, what: str) -> None:
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise ValueError(f"{what}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------------------
# forward process and conversions


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_same_shape(x0, eps, "q_sample")
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def x0_from_eps(x_t, eps_pred, t, sched: NoiseSchedule):
    _check_same_shape(x_t, eps_pred, "x0_from_eps")
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return (x_t - _bcast(np.sqrt(1.0 - ab), x_t) * eps_pred) * _bcast(1.0 / np.sqrt(ab), x_t)


def eps_from_x0(x_t, x0_pred, t, sched: NoiseSchedule):
    _check_same_shape(x_t, x0_pred, "eps_from_x0")
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return (x_t - _bcast(np.sqrt(ab), x_t) * x0_pred) * _bcast(1.0 / np.sqrt(1.0 - ab), x_t)


def posterior_coefficients(t, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """(coefficient on x0, coefficient on x_t) of the posterior mean."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(np.asarray(t) - 1)
    beta = sched.beta(t)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct


def posterior_mean(x0, x_t, t, sched: NoiseSchedule):
    _check_same_shape(x0, x_t, "posterior_mean")
    c0, ct = posterior_coefficients(t, sched)
    return _bcast(c0, x_t) * x0 + _bcast(ct, x_t) * x_t


def posterior_variance(t, sched: NoiseSchedule) -> np.ndarray:
    """beta_tilde_t = beta_t (1 - ab_{t-1}) / (1 - ab_t); zero at t = 1."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(np.asarray(t) - 1)
    return sched.beta(t) * (1.0 - ab_prev) / (1.0 - ab)


def mu_from_eps(x_t, eps_pred, t, sched: NoiseSchedule):
    _check_same_shape(x_t, eps_pred, "mu_from_eps")
    sched.check_step(t)
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    c_x = 1.0 / np.sqrt(alpha)
    c_e = (1.0 - alpha) / (np.sqrt(1.0 - ab) * np.sqrt(alpha))
    return _bcast(c_x, x_t) * x_t - _bcast(c_e, x_t) * eps_pred


def mix_mu(mu_x0, mu_eps, r):
    """r * mu_x0 + (1 - r) * mu_eps, with r broadcast over channels."""
    rd = r.data if isinstance(r, Tensor) else np.asarray(r)
    if rd.size and (np.nanmin(rd) < 0.0 or np.nanmax(rd) > 1.0):
        raise ValueError("mixing weight r must lie in [0, 1]")
    return r * mu_x0 + (1 - r) * mu_eps


@dataclass(frozen=True)
class PosteriorMeans:
    mu_tilde: np.ndarray
    mu_from_eps: np.ndarray
    mu_from_x0: np.ndarray
    mu_mixed: np.ndarray


def posterior_means(x0_true, x_t, eps_pred, x0_pred, r, t, sched: NoiseSchedule) -> PosteriorMeans:
    mu_e = mu_from_eps(x_t, eps_pred, t, sched)
    mu_x = posterior_mean(x0_pred, x_t, t, sched)
    return PosteriorMeans(
        mu_tilde=posterior_mean(x0_true, x_t, t, sched),
        mu_from_eps=mu_e,
        mu_from_x0=mu_x,
        mu_mixed=mix_mu(mu_x, mu_e, r),
    )


# ---------------------------------------------------------------------------
# respacing


@dataclass(frozen=True)
class RespacedSchedule:
    base: NoiseSchedule
    timesteps: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.int64)
        ts.setflags(write=False)
        object.__setattr__(self, "timesteps", ts)

    def __len__(self) -> int:
        return int(self.timesteps.shape[0])

    @property
    def alpha_bars(self) -> np.ndarray:
        return self.base.alpha_bar(self.timesteps)

    @property
    def prev_timesteps(self) -> np.ndarray:
        """Step preceding each respaced step; 0 (alpha_bar = 1) before the first."""
        return np.concatenate([[0], self.timesteps[:-1]])

    @property
    def alphas(self) -> np.ndarray:
        """Per-jump alpha of the respaced chain: ab_t / ab_prev."""
        return self.alpha_bars / self.base.alpha_bar(self.prev_timesteps)

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) in sampling order, from T downwards."""
        prev = self.prev_timesteps
        return [(int(self.timesteps[i]), int(prev[i])) for i in range(len(self) - 1, -1, -1)]


def respace(sched: NoiseSchedule, n_steps: int) -> RespacedSchedule:
    if n_steps < 1 or n_steps > sched.T:
        raise ValueError(f"n_steps must be in [1, {sched.T}], got {n_steps}")
    stride = sched.T // n_steps
    ts = sched.T - stride * np.arange(n_steps - 1, -1, -1)
    return RespacedSchedule(base=sched, timesteps=ts)
