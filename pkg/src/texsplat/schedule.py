"""DDIM noise schedule and the deterministic invert/denoise step pair.

The two steps are exact algebraic inverses of each other, which is what makes
partial editing work: a latent inverted ``kappa`` steps and denoised back with
the same noise predictions reproduces the input to floating-point accuracy.
All schedule math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-product alpha sequence of a deterministic DDIM sampler.

    ``alphas[t]`` is the signal fraction at step t; ``alphas[0] == 1`` and the
    sequence is strictly decreasing.
    """

    alphas: np.ndarray
    t_max: int

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or len(a) != self.t_max + 1:
            raise ValueError(f"alphas must have length t_max+1={self.t_max + 1}, got {len(a)}")
        if a[0] < 0.999:
            raise ValueError(f"alpha_0 must be >= 0.999, got {a[0]}")
        if a[-1] <= 0.0:
            raise ValueError("alpha at t_max must be positive")
        if not np.all(np.diff(a) < 0.0):
            raise ValueError("alphas must be strictly decreasing in t")


def build_schedule(t_max: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build the alpha schedule from a linear beta ramp.

    alpha_t is the cumulative product of (1 - beta_s) for s = 1..t, with
    alpha_0 = 1. Raises ValueError on out-of-range arguments or if the
    resulting schedule violates the NoiseSchedule invariants.
    """
    if t_max < 2:
        raise ValueError(f"t_max must be >= 2, got {t_max}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alphas=alphas, t_max=t_max)


def _check_step_args(z_t: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule,
                     t_lo: int, t_hi: int) -> None:
    if z_t.shape != eps.shape:
        raise ValueError(f"latent/noise shape mismatch: {z_t.shape} vs {eps.shape}")
    if not (t_lo <= t <= t_hi):
        raise IndexError(f"step index {t} outside [{t_lo}, {t_hi}]")


def ddim_denoise_step(z_t: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """One deterministic reverse step: latent at t -> latent at t-1."""
    _check_step_args(z_t, eps, t, s, 1, s.t_max)
    a_t = s.alphas[t]
    a_prev = s.alphas[t - 1]
    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * eps


def ddim_invert_step(z_t: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """One deterministic forward step: latent at t -> latent at t+1.

    Exact inverse of ddim_denoise_step for the same eps.
    """
    _check_step_args(z_t, eps, t, s, 0, s.t_max - 1)
    a_t = s.alphas[t]
    a_next = s.alphas[t + 1]
    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_next) * z0_hat + np.sqrt(1.0 - a_next) * eps


def partial_invert(z_0: np.ndarray, kappa: int, s: NoiseSchedule,
                   eps_provider: Callable[[np.ndarray, int], np.ndarray]) -> np.ndarray:
    """Invert a clean latent ``kappa`` steps up the schedule.

    ``eps_provider(z, t)`` supplies the noise prediction used at each step and
    must be deterministic for a given (z, t).
    """
    if not (1 <= kappa <= s.t_max):
        raise IndexError(f"kappa {kappa} outside [1, {s.t_max}]")
    z = z_0
    for t in range(kappa):
        z = ddim_invert_step(z, eps_provider(z, t), t, s)
    return z


@dataclass(frozen=True)
class KappaAssignment:
    """Per-view partial-diffusion depth; the reference view gets the smallest."""

    kappas: dict[int, int]
    tau: int

    def __getitem__(self, view_id: int) -> int:
        return self.kappas[view_id]


def assign_kappa(views: Sequence[int], tau: int, kappa_ref: int,
                 kappa_other: int) -> KappaAssignment:
    """Assign kappa_ref to the reference view tau and kappa_other elsewhere."""
    if tau not in views:
        raise ValueError(f"reference view {tau} not in views")
    if kappa_ref >= kappa_other:
        raise ValueError(f"kappa_ref must be < kappa_other, got {kappa_ref} >= {kappa_other}")
    if kappa_ref < 1:
        raise ValueError("kappa_ref must be positive")
    return KappaAssignment(
        kappas={v: (kappa_ref if v == tau else kappa_other) for v in views},
        tau=tau,
    )
