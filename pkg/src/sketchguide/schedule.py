"""Noise schedules, closed-form forward noising and deterministic DDIM steps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericalError

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable variance schedule indexed by step t = 1..T.

    ``betas[t - 1]`` holds beta_t and ``alpha_bars[t - 1]`` the cumulative
    product of (1 - beta_s) for s <= t. ``alpha_bar(0)`` is defined as 1.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        for name in ("betas", "alpha_bars"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise InputError(f"step index {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _cosine_betas(T: int, beta_start: float, beta_end: float, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = 1.0 - ab[1:] / ab[:-1]
    # clipping keeps every beta strictly inside (0, 1)
    return np.clip(betas, beta_start, beta_end)


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    ``linear`` spaces betas evenly between the bounds. ``cosine`` follows the
    squared-cosine cumulative profile with betas clipped into
    ``[beta_start, beta_end]``.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not beta_start > 0:
        raise ConfigError(f"beta_start must be > 0, got {beta_start}")
    if not beta_end < 1:
        raise ConfigError(f"beta_end must be < 1, got {beta_end}")
    if not beta_start <= beta_end:
        raise ConfigError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = _cosine_betas(T, beta_start, beta_end)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bars, kind, float(beta_start), float(beta_end))


def _coef(sched: NoiseSchedule, t, like: torch.Tensor, prev: bool = False) -> torch.Tensor:
    """Per-sample sqrt(alpha_bar) lookup broadcast against ``like``."""
    table = np.concatenate([[1.0], sched.alpha_bars])
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        idx = t.cpu().numpy()
        if idx.min() < (0 if prev else 1) or idx.max() > sched.T:
            raise InputError(f"step indices outside [1, {sched.T}]")
        vals = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
        return vals.view(-1, *([1] * (like.ndim - 1)))
    t = int(t)
    if t < (0 if prev else 1) or t > sched.T:
        raise InputError(f"step index {t} outside [1, {sched.T}]")
    return torch.tensor(table[t], dtype=like.dtype, device=like.device)


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample z_t from q(z_t | x0) given the noise draw ``eps``.

    ``t`` is an int or a 1-D tensor of per-sample steps (batched input).
    """
    if x0.shape != eps.shape:
        raise InputError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    ab = _coef(sched, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    ab = _coef(sched, t, z_t)
    if torch.any(ab <= 0):
        raise NumericalError("alpha_bar is zero; cannot recover x0", step=t)
    return (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule, t_prev=None,
              clip_x0=None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev``.

    ``t_prev`` defaults to ``t - 1``; pass a smaller value to skip steps.
    ``clip_x0=(lo, hi)`` clamps the clean estimate to the data range and
    re-derives the noise estimate from it (pixel-space models only).
    """
    if z_t.shape != eps_hat.shape:
        raise InputError(f"z_t shape {tuple(z_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    if t_prev is None:
        t_prev = t - 1
    x0_hat = predict_x0(z_t, eps_hat, t, sched)
    if clip_x0 is not None:
        x0_hat = x0_hat.clamp(*clip_x0)
        ab = _coef(sched, t, z_t)
        if torch.all(ab < 1):
            eps_hat = (z_t - ab.sqrt() * x0_hat) / (1 - ab).sqrt()
    ab_prev = _coef(sched, t_prev, z_t, prev=True)
    return ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps_hat


def respaced_timesteps(train_T: int, sample_T: int) -> list[int]:
    """Schedule indices visited by a ``sample_T``-step sampler, plus a leading 0.

    Entry k is the schedule step used at loop iteration k (k = 0..sample_T).
    Without skipping this is simply ``[0, 1, ..., T]``.
    """
    if not 1 <= sample_T <= train_T:
        raise ConfigError(f"sampling steps {sample_T} must lie in [1, {train_T}]")
    return [int(round(k * train_T / sample_T)) for k in range(sample_T + 1)]
