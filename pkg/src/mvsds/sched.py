"""Discrete diffusion schedules, forward noising, x0 recovery and DDIM updates.

All functions accept numpy arrays or torch tensors for image-like inputs; the
schedule itself is stored as float64 numpy arrays and indexed by integer
timestep ``t`` in ``[0, T)``.  ``t = -1`` denotes the clean endpoint
(alpha = 1, sigma = 0) and is only meaningful as a DDIM target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAMILIES = ("linear_beta", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    alpha: np.ndarray
    sigma: np.ndarray
    derivation: str

    def coeffs(self, t: int) -> tuple[float, float]:
        """Return ``(alpha_t, sigma_t)`` as python floats."""
        t = int(t)
        if t == -1:
            return 1.0, 0.0
        if not 0 <= t < self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps})")
        return float(self.alpha[t]), float(self.sigma[t])


def build_schedule(
    T: int = 1000,
    family: str = "linear_beta",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if int(T) < 2:
        raise ValueError(f"schedule needs at least 2 steps, got T={T}")
    T = int(T)
    if family == "linear_beta":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        tag = f"linear_beta[{beta_start:g},{beta_end:g}]"
    elif family == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
        tag = "cosine[s=0.008,max_beta=0.999]"
    else:
        raise ValueError(f"unknown schedule family {family!r}; expected one of {FAMILIES}")
    abar = np.cumprod(1.0 - betas)
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(num_steps=T, alpha=alpha, sigma=sigma, derivation=tag)


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x, eps, t: int, sched: NoiseSchedule):
    """x_t = alpha_t * x + sigma_t * eps."""
    _check_same_shape(x, eps, "add_noise")
    a, s = sched.coeffs(t)
    return a * x + s * eps


def estimate_x0(x_t, eps_pred, t: int, sched: NoiseSchedule):
    """Invert the noising for a predicted noise: (x_t - sigma_t * eps) / alpha_t."""
    _check_same_shape(x_t, eps_pred, "estimate_x0")
    a, s = sched.coeffs(t)
    if a == 0.0:
        raise FloatingPointError(f"alpha_{t} is zero; x0 is not recoverable")
    return (x_t - s * eps_pred) / a


def ddim_step(x_t, eps_pred, t_from: int, t_to: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from ``t_from`` to ``t_to``."""
    if t_to >= t_from:
        raise ValueError(f"DDIM must move backwards in time, got {t_from} -> {t_to}")
    x0 = estimate_x0(x_t, eps_pred, t_from, sched)
    a, s = sched.coeffs(t_to)
    return a * x0 + s * eps_pred


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Uniform decreasing sub-sequence starting at T-1, terminated by -1."""
    if n_steps < 1:
        raise ValueError("need at least one DDIM step")
    if n_steps == 1:
        return [T - 1, -1]
    ts = np.round(np.linspace(T - 1, 0, n_steps)).astype(int)
    return [int(v) for v in ts] + [-1]


@dataclass(frozen=True)
class AnnealWindow:
    t_max_start: float = 0.98
    t_max_end: float = 0.5
    t_min_start: float = 0.98
    t_min_end: float = 0.02
    anneal_steps: int = 8000


def _frac_to_step(frac: float, T: int) -> int:
    # 1e-9 guards against 0.98 * 1000 landing on 979.999...
    return int(math.floor(frac * T + 1e-9))


def anneal_bounds(step: int, win: AnnealWindow, T: int) -> tuple[int, int]:
    """Linearly annealed ``(t_min, t_max)`` for an optimization step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    r = 1.0 if win.anneal_steps <= 0 else min(step / win.anneal_steps, 1.0)
    t_max = win.t_max_start + r * (win.t_max_end - win.t_max_start)
    t_min = win.t_min_start + r * (win.t_min_end - win.t_min_start)
    return _frac_to_step(t_min, T), _frac_to_step(t_max, T)
