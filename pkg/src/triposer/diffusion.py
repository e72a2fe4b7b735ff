"""DDPM machinery: linear schedule, forward noising and ancestral sampling.

Steps are integers ``1..T``; ``gamma[t - 1]`` is the per-step noise variance
and ``alpha_bar[t - 1]`` the running product of ``1 - gamma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    gamma: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_gammas(cls, gammas, check: bool = True) -> "NoiseSchedule":
        g = np.array(gammas, dtype=np.float64).reshape(-1)
        if g.size < 1:
            raise ValueError("schedule needs at least one step")
        if check and not np.all((g > 0) & (g < 1)):
            raise ValueError("gamma_t must lie in (0, 1)")
        if not np.all((g >= 0) & (g < 1)):
            raise ValueError("gamma_t must lie in [0, 1)")
        a = np.cumprod(1.0 - g)
        g.setflags(write=False)
        a.setflags(write=False)
        return cls(g, a)

    @property
    def T(self) -> int:
        return self.gamma.shape[0]

    def gamma_at(self, t: int) -> float:
        return float(self.gamma[self._check(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check(t) - 1])

    def _check(self, t) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return t


def make_linear_schedule(T: int = 1000, gamma_start: float | None = None,
                         gamma_end: float | None = None) -> NoiseSchedule:
    """Linear gammas.  Unset endpoints default to 1e-4 and 0.02 scaled by
    ``1000 / T`` so short chains still end near pure noise."""
    if T < 1:
        raise ValueError("T must be >= 1")
    scale = 1000.0 / T
    gamma_start = 1e-4 * scale if gamma_start is None else gamma_start
    gamma_end = min(0.02 * scale, 0.999) if gamma_end is None else gamma_end
    if not 0 < gamma_start <= gamma_end < 1:
        raise ValueError("need 0 < gamma_start <= gamma_end < 1")
    return NoiseSchedule.from_gammas(np.linspace(gamma_start, gamma_end, T))


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Per-item coefficient broadcast against ``like`` (batch on dim 0)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.tensor(values, dtype=like.dtype)[t.long() - 1]
        return c.reshape((-1,) + (1,) * (like.ndim - 1))
    return float(values[int(t) - 1])


def forward_step(F_prev: torch.Tensor, t: int, sched: NoiseSchedule,
                 generator: torch.Generator | None = None, noise: torch.Tensor | None = None):
    """One noising step ``q(F_t | F_{t-1})``."""
    g = sched.gamma_at(t)
    if noise is None:
        noise = torch.randn(F_prev.shape, generator=generator, dtype=F_prev.dtype)
    if g == 0.0:
        return F_prev.clone()
    return math.sqrt(1.0 - g) * F_prev + math.sqrt(g) * noise


def forward_marginal(F0: torch.Tensor, t, sched: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    """Closed form ``F_t = sqrt(abar_t) F0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or a (B,) tensor of steps for batched ``F0``.
    """
    if eps.shape != F0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != F0 shape {tuple(F0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if ((t < 1) | (t > sched.T)).any():
            raise ValueError(f"steps outside [1, {sched.T}]")
    else:
        sched._check(t)
    a = _coef(np.sqrt(sched.alpha_bar), t, F0)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, F0)
    return a * F0 + b * eps


@dataclass
class TrainingExample:
    latent: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    cond: torch.Tensor


def training_example(F0: torch.Tensor, cond: torch.Tensor, sched: NoiseSchedule,
                     generator: torch.Generator | None = None) -> TrainingExample:
    """Noise a batch of targets ``F0`` (B, ...) at uniformly drawn steps."""
    B = F0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(F0.shape, generator=generator, dtype=F0.dtype)
    return TrainingExample(forward_marginal(F0, t, sched, eps), t, eps, cond)


def predict_x0(latent: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    a = _coef(np.sqrt(sched.alpha_bar), t, latent)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, latent)
    return (latent - b * eps_hat) / a


@torch.no_grad()
def ancestral_sample(model, cond, sched: NoiseSchedule, generator: torch.Generator | None,
                     shape, dtype=torch.float32, x_T: torch.Tensor | None = None,
                     clip_x0: float | None = None) -> torch.Tensor:
    """Run the reverse chain from ``t = T`` down to 1 with sigma_t^2 = gamma_t.

    ``model(x, t, cond)`` returns the noise prediction; ``t`` is passed as a
    (B,) long tensor.  No noise is added on the final step.  With ``clip_x0``
    the implied clean sample is clamped to [-clip_x0, clip_x0] and the step
    uses the posterior mean written in terms of it; unclamped, that mean is
    the same as the noise form.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T.clone()
    B = shape[0]
    for t in range(sched.T, 0, -1):
        g = float(sched.gamma[t - 1])
        ab = float(sched.alpha_bar[t - 1])
        eps = model(x, torch.full((B,), t, dtype=torch.long), cond)
        if clip_x0 is None:
            x = (x - (g / math.sqrt(1.0 - ab)) * eps) / math.sqrt(1.0 - g)
        else:
            ab_prev = float(sched.alpha_bar[t - 2]) if t > 1 else 1.0
            x0 = ((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-clip_x0, clip_x0)
            x = (math.sqrt(ab_prev) * g / (1.0 - ab)) * x0 + (math.sqrt(1.0 - g) * (1.0 - ab_prev) / (1.0 - ab)) * x
        if t > 1:
            x = x + math.sqrt(g) * torch.randn(shape, generator=generator, dtype=dtype)
        if not torch.isfinite(x).all():
            finite = x[torch.isfinite(x)]
            peak = float(finite.abs().max()) if finite.numel() else float("nan")
            raise NumericalError(
                f"non-finite sample at step {t} (max finite magnitude {peak:.3g})",
                step=t, max_magnitude=peak,
            )
    return x
