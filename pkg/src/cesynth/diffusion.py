"""Cosine noise schedule, forward noising, reverse posterior mean, and the
ancestral sampling loop for clean-image-predicting conditional models.

The reverse mean divides out the per-step alpha exactly as

    mu = (1/sqrt(alpha_t)) * (x_t - ((1 - alpha_t)/sqrt(1 - alpha_bar_t)) * x0_hat)

with the predicted clean image in place of the noise term. A standard
q-posterior mean is available behind ``mean_rule="q_posterior"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

ALPHA_MIN = 0.001
ALPHA_MAX = 0.9999


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule table; alpha_bar is indexed 0..T, alpha by t in 1..T."""

    T: int
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] == 1
    alpha: np.ndarray  # length T+1, alpha[0] unused placeholder 1.0
    offset_s: float

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t])

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


@dataclass(frozen=True)
class NoisedSample:
    x_t: object  # array or tensor, same shape as x0
    t: object  # int or integer tensor
    eps: object  # the Gaussian draw used


def make_cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T+s)/(1+s)) * pi/2).

    Per-step alphas are clipped to [0.001, 0.9999] and alpha_bar is rebuilt
    as their cumulative product, so the table stays self-consistent.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if s <= 0:
        raise ValueError(f"cosine offset s must be > 0, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    raw_bar = f / f[0]
    alpha = np.ones(T + 1, dtype=np.float64)
    alpha[1:] = np.clip(raw_bar[1:] / raw_bar[:-1], ALPHA_MIN, ALPHA_MAX)
    alpha_bar = np.ones(T + 1, dtype=np.float64)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    return DiffusionSchedule(T=T, alpha_bar=alpha_bar, alpha=alpha, offset_s=s)


def _coeff_like(values: np.ndarray, t, x):
    """alpha-table lookup shaped to broadcast against x (scalar t or batch)."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    t_idx = torch.as_tensor(t, dtype=torch.long)
    coeff = torch.as_tensor(values, dtype=x.dtype, device=x.device)[t_idx]
    return coeff.reshape(-1, *([1] * (x.ndim - 1)))


def _check_t_range(t, T: int) -> None:
    if isinstance(t, (int, np.integer)):
        if not 1 <= int(t) <= T:
            raise ValueError(f"timestep {t} outside [1, {T}]")
    else:
        t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if t_arr.min() < 1 or t_arr.max() > T:
            raise ValueError(f"timesteps {t_arr.min()}..{t_arr.max()} outside [1, {T}]")


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> NoisedSample:
    """Forward noising: x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    _check_t_range(t, sched.T)
    ab = _coeff_like(sched.alpha_bar, t, x0)
    if isinstance(ab, float):
        x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    else:
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return NoisedSample(x_t=x_t, t=t, eps=eps)


def _step_mean(x_t, x0_hat, alpha, alpha_bar, rule: str = "paper"):
    """One reverse-mean step given the effective per-step alpha and the
    cumulative alpha_bar at the current timestep."""
    if rule == "paper":
        coef = (1.0 - alpha) / math.sqrt(1.0 - alpha_bar)
        return (x_t - coef * x0_hat) / math.sqrt(alpha)
    if rule == "q_posterior":
        alpha_bar_prev = alpha_bar / alpha
        beta = 1.0 - alpha
        c0 = math.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
        ct = math.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        return c0 * x0_hat + ct * x_t
    raise ValueError(f"unknown mean rule {rule!r}")


def posterior_mean(x_t, x0_hat, t: int, sched: DiffusionSchedule):
    """Reverse posterior mean at timestep t, exactly the x0-form equation."""
    _check_t_range(t, sched.T)
    return _step_mean(x_t, x0_hat, sched.alpha_at(t), sched.alpha_bar_at(t), rule="paper")


def _sigma(alpha: float, alpha_bar: float, rule: str) -> float:
    alpha_bar_prev = alpha_bar / alpha
    if rule == "posterior":
        return math.sqrt(max((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha), 0.0))
    if rule == "beta":
        return math.sqrt(max(1.0 - alpha, 0.0))
    raise ValueError(f"unknown sigma rule {rule!r}")


def sampling_timesteps(T: int, steps: Optional[int]) -> list[int]:
    """Descending timestep subset; uniform stride when steps < T."""
    if steps is None or steps >= T:
        return list(range(T, 0, -1))
    if steps < 1:
        raise ValueError(f"need at least one sampling step, got {steps}")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))
    return [int(v) for v in ts[::-1]]


def sample(
    model: Callable,
    condition,
    sched: DiffusionSchedule,
    seed: int,
    sigma_rule: str = "posterior",
    steps: Optional[int] = None,
    clamp_range: tuple[float, float] = (0.0, 1.0),
    mean_rule: str = "paper",
) -> torch.Tensor:
    """Ancestral sampling for an x0-predicting model.

    Starts from pure Gaussian noise, walks the (possibly strided) timestep
    ladder, clamps each clean-image prediction to the target range, and
    returns the final clean-image prediction. Deterministic per seed.
    """
    pre = condition.pre if torch.is_tensor(condition.pre) else torch.tensor(np.asarray(condition.pre))
    if pre.ndim == 2:
        pre = pre[None, None]
    shape = (pre.shape[0], 1, pre.shape[-2], pre.shape[-1])
    gens = [torch.Generator().manual_seed(seed + i) for i in range(shape[0])]

    def _randn():
        # per-item generators so batch composition never couples RNG streams
        return torch.stack(
            [torch.randn(1, shape[2], shape[3], generator=g, dtype=pre.dtype) for g in gens]
        )

    ts = sampling_timesteps(sched.T, steps)
    x = _randn()
    x0_hat = None
    for i, t in enumerate(ts):
        try:
            x0_hat = model(x, condition, t)
        except Exception as exc:
            raise RuntimeError(f"model failed at timestep {t}") from exc
        x0_hat = torch.clamp(x0_hat, clamp_range[0], clamp_range[1])
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_cur = sched.alpha_bar_at(t)
        ab_prev = sched.alpha_bar_at(t_prev)
        alpha_eff = ab_cur / ab_prev
        mu = _step_mean(x, x0_hat, alpha_eff, ab_cur, rule=mean_rule)
        if t_prev == 0:
            x = mu
        else:
            x = mu + _sigma(alpha_eff, ab_cur, sigma_rule) * _randn()
    return x0_hat
