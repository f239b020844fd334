"""Diffusion over the compact embedding prior.

The chain runs on flat C-vectors. The reverse update is deterministic:

    z_{t-1} = (z_t - eps_theta(z_t, t, x_s2) * coef_t) / sqrt(alpha_t)

with ``coef_t = (1 - alpha_t) / sqrt(1 - alpha_t)`` for the ``paper``
variant and ``(1 - alpha_t) / sqrt(1 - alpha_bar_t)`` for ``ddpm_bar``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import brentq
from torch import Tensor

VARIANTS = ("paper", "ddpm_bar")
TARGET_ALPHA_BAR = 0.005


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    beta: np.ndarray  # beta[t-1] is beta_t, t = 1..T

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def validate(self) -> None:
        b = self.beta
        if b.ndim != 1 or len(b) < 1:
            raise ScheduleError("schedule needs at least one step")
        if not np.all((b > 0) & (b < 1)):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        ab = np.concatenate([[1.0], self.alpha_bar])
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist()}

    @classmethod
    def from_betas(cls, betas: Sequence[float], allow_degenerate: bool = False) -> "BetaSchedule":
        """Build from explicit betas; ``allow_degenerate`` admits beta = 0 (tests only)."""
        s = cls(np.asarray(betas, dtype=np.float64))
        if allow_degenerate:
            if not np.all((s.beta >= 0) & (s.beta < 1)):
                raise ScheduleError("beta_t must lie in [0, 1)")
        else:
            s.validate()
        return s


def make_schedule(T: int, beta_start: float, beta_end: float) -> BetaSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end``."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_end])
    s = BetaSchedule(betas)
    s.validate()
    return s


def default_schedule(T: int, beta_start: float = 0.1, target: float = TARGET_ALPHA_BAR) -> BetaSchedule:
    """Linear schedule whose end point is solved so that alpha_bar_T == target.

    If even a constant ``beta_start`` overshoots the target (long chains), a
    constant schedule hitting the target exactly is returned instead.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if T == 1:
        return make_schedule(1, 1 - target, 1 - target)
    if (1 - beta_start) ** T <= target:
        b = 1 - target ** (1 / T)
        return make_schedule(T, b, b)

    def gap(beta_end: float) -> float:
        return float(np.log(np.prod(1 - np.linspace(beta_start, beta_end, T))) - np.log(target))

    beta_end = brentq(gap, beta_start, 1 - 1e-9, xtol=1e-14)
    return make_schedule(T, beta_start, beta_end)


def q_sample(z: Tensor, schedule: BetaSchedule, noise: Tensor, t: Optional[int] = None) -> Tensor:
    """z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) noise (t defaults to T)."""
    if noise.shape != z.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != EPD shape {tuple(z.shape)}")
    ab = schedule.alpha_bar_at(schedule.T if t is None else t)
    return math.sqrt(ab) * z + math.sqrt(1.0 - ab) * noise


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of a (possibly fractional) time in [0, 1] scaled by 1000."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """eps_theta(Concat(z_t, emb(t / T), x_s2)) as an MLP of width 4C."""

    def __init__(self, epd_dim: int, layers: int = 4, time_dim: int = 32):
        super().__init__()
        if layers < 2:
            raise ValueError("denoiser needs at least 2 layers")
        self.epd_dim, self.time_dim = epd_dim, time_dim
        hidden = 4 * epd_dim
        dims = [2 * epd_dim + time_dim] + [hidden] * (layers - 1) + [epd_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, z_t: Tensor, t: int | Tensor, x_s2: Tensor, T: int) -> Tensor:
        if z_t.shape[-1] != self.epd_dim or x_s2.shape[-1] != self.epd_dim:
            raise ValueError(f"denoiser expects {self.epd_dim}-dim z_t and x_s2")
        if z_t.shape != x_s2.shape:
            raise ValueError(f"z_t {tuple(z_t.shape)} and x_s2 {tuple(x_s2.shape)} differ")
        tt = torch.as_tensor(t, dtype=z_t.dtype, device=z_t.device).expand(z_t.shape[0]) / T
        h = torch.cat([z_t, timestep_embedding(tt, self.time_dim), x_s2], dim=-1)
        for layer in self.layers[:-1]:
            h = F.silu(layer(h))
        return self.layers[-1](h)


def step_coefficient(schedule: BetaSchedule, t: int, variant: str = "paper") -> float:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    one_minus_alpha = 1.0 - schedule.alpha_at(t)
    denom = one_minus_alpha if variant == "paper" else 1.0 - schedule.alpha_bar_at(t)
    if one_minus_alpha == 0.0 or denom <= 0.0:
        return 0.0
    return one_minus_alpha / math.sqrt(denom)


def reverse_step(
    z_t: Tensor,
    t: int,
    eps: Tensor,
    schedule: BetaSchedule,
    variant: str = "paper",
) -> Tensor:
    """One deterministic reverse update given the predicted noise ``eps``."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    coef = step_coefficient(schedule, t, variant)
    return (z_t - eps * coef) / math.sqrt(schedule.alpha_at(t))


def denoise_step(
    z_t: Tensor,
    t: int,
    x_s2: Tensor,
    schedule: BetaSchedule,
    denoiser: nn.Module,
    variant: str = "paper",
) -> Tensor:
    return reverse_step(z_t, t, denoiser(z_t, t, x_s2, schedule.T), schedule, variant)


def run_reverse_chain(
    z_T: Tensor,
    x_s2: Tensor,
    schedule: BetaSchedule,
    denoiser: nn.Module,
    variant: str = "paper",
    trace: Optional[list] = None,
) -> Tensor:
    """Fold ``reverse_step`` from t = T down to 1 and return Z_0'."""
    z = z_T
    for t in range(schedule.T, 0, -1):
        z = denoise_step(z, t, x_s2, schedule, denoiser, variant)
        if trace is not None:
            trace.append(z.detach())
    return z


def kl_loss(z: Tensor, z_hat: Tensor, reduction: str = "sum") -> Tensor:
    """sum_i p_i log(p_i / q_i) with p = softmax(z), q = softmax(z_hat).

    Works on (C,) or (B, C); batch reduction is ``sum`` or ``mean``.
    """
    if z.shape != z_hat.shape:
        raise ValueError(f"EPD shapes differ: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    if not (torch.isfinite(z).all() and torch.isfinite(z_hat).all()):
        raise ValueError("kl_loss got non-finite input")
    log_p = F.log_softmax(z, dim=-1)
    log_q = F.log_softmax(z_hat, dim=-1)
    per = (log_p.exp() * (log_p - log_q)).sum(-1).clamp_min(0.0)
    if per.ndim == 0:
        return per
    return per.sum() if reduction == "sum" else per.mean()


def total_loss(ce: Tensor | float, kl: Tensor | float) -> Tensor | float:
    """Unweighted sum of the classification and prior-alignment losses."""
    for v in (ce, kl):
        if not math.isfinite(float(v)):
            raise ValueError("total_loss inputs must be finite")
    return ce + kl
