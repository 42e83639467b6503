"""Sketch-guided DDIM sampling.

Each reverse step runs the conditioned denoiser once. While the step lies in
the guidance window, that pass is differentiated end to end (denoiser taps ->
feature stack -> edge predictor -> similarity) and the resulting gradient
with respect to z_t corrects the DDIM estimate of z_{t-1}, scaled so the
correction's norm is ``beta_strength`` times the norm of the DDIM update.
"""
from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import torch

from .backbone import NULL_LABEL, cfg_mix
from .errors import ConfigError, InputError, NumericalError
from .lep import predict_edges
from .schedule import NoiseSchedule, ddim_step, respaced_timesteps
from .seeding import torch_generator
from .training import check_compatibility, edge_loss, features_for


@dataclass
class GuidanceConfig:
    T: int = 50
    S: int | None = None
    beta_strength: float = 1.6
    cfg_scale: float = 8.0
    seed: int = 0
    grad_eps: float = 1e-8
    p_max: int = 9
    normalize_t: bool = False
    clip_denoised: tuple | None = None

    def __post_init__(self):
        if self.clip_denoised is not None:
            lo, hi = self.clip_denoised
            if not lo < hi:
                raise ConfigError(f"clip_denoised bounds must satisfy lo < hi, got {self.clip_denoised}")
            self.clip_denoised = (float(lo), float(hi))
        if self.S is None:
            self.S = math.ceil(0.5 * self.T)
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 1 <= self.S <= self.T:
            raise ConfigError(f"S must lie in [1, T={self.T}], got {self.S}")
        if self.beta_strength < 0:
            raise ConfigError(f"beta_strength must be >= 0, got {self.beta_strength}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not self.grad_eps > 0:
            raise ConfigError(f"grad_eps must be > 0, got {self.grad_eps}")

    def advisories(self) -> list:
        """Settings outside the empirically good ranges (not errors)."""
        notes = []
        if not 1.5 <= self.beta_strength <= 1.8:
            notes.append(f"beta_strength {self.beta_strength} outside the recommended [1.5, 1.8]")
        if not 0.45 * self.T <= self.S <= 0.55 * self.T:
            notes.append(f"S={self.S} outside the recommended [0.45T, 0.55T] for T={self.T}")
        return notes

    def in_window(self, k: int) -> bool:
        """Loop step ``k`` (counting T down to 1) receives guidance iff T - k <= S."""
        return self.T - k <= self.S


@dataclass
class StepRecord:
    step: int
    t: int
    loss: float | None
    alpha: float
    applied: bool
    in_window: bool
    skip_reason: str | None = None
    wall_time: float = 0.0


@dataclass
class SampleResult:
    image: torch.Tensor
    latent: torch.Tensor
    diagnostics: list = field(default_factory=list)
    seed: int = 0


def sketch_similarity(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance; shares its numerics with ``edge_loss``."""
    return edge_loss(pred, target)


def guidance_strength(z_t: torch.Tensor, z_prev: torch.Tensor, grad: torch.Tensor, beta_strength: float,
                      grad_eps: float = 1e-8):
    """alpha = beta * ||z_t - z_prev|| / ||grad||, or None when ||grad|| < grad_eps."""
    if not (z_t.shape == z_prev.shape == grad.shape):
        raise InputError("z_t, z_prev and grad must share a shape")
    gnorm = torch.linalg.vector_norm(grad)
    if gnorm < grad_eps:
        return None
    return torch.linalg.vector_norm(z_t - z_prev) / gnorm * beta_strength


def _batch_similarity(pred, target):
    return torch.stack([sketch_similarity(p, q) for p, q in zip(pred, target)])


def similarity_gradient(backbone, lep, z_t, t, labels, targets, taps, cfg: GuidanceConfig, T: int):
    """One conditioned pass differentiated end to end.

    Returns ``(eps_cond, L, dL/dz_t)`` with per-chain similarities ``L`` of
    shape [B]. Chains are independent, so the gradient of the summed loss
    gives each chain its own gradient.
    """
    z_in = z_t.detach().requires_grad_(True)
    with torch.enable_grad():
        eps_c, stack = features_for(backbone, z_in, t, labels, taps, cfg.p_max, cfg.normalize_t, T)
        loss = _batch_similarity(predict_edges(lep, stack), targets)
        grad, = torch.autograd.grad(loss.sum(), z_in)
    return eps_c.detach(), loss.detach(), grad


def initial_noise(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=torch_generator(seed, "sampler/noise_init"), dtype=dtype)


def _labels(y, n):
    return list(y) if isinstance(y, (list, tuple)) else [y] * n


def sample_batch(backbone, codec, lep, targets, y, seeds, cfg: GuidanceConfig, sched: NoiseSchedule,
                 guided: bool = True, taps=None, record_loss: bool = True):
    """Run a batch of independent sampling chains.

    ``targets`` is a [B, C, H, W] tensor of encoded sketches (ignored when
    ``guided`` is False), ``y`` a label or per-chain labels and ``seeds`` one
    seed per chain. Returns one :class:`SampleResult` per chain.
    """
    cfg_ = backbone.config
    latent_shape = (cfg_.channels, cfg_.image_size, cfg_.image_size)
    B = len(seeds)
    labels = _labels(y, B)
    taps = taps or backbone.default_taps()
    dtype = next(backbone.parameters()).dtype
    if guided:
        if lep is None:
            raise ConfigError("guided sampling needs an edge predictor")
        check_compatibility(lep, backbone, taps, cfg.p_max)
        if targets is None or tuple(targets.shape) != (B, *latent_shape):
            raise InputError(f"sketch latents must have shape {(B, *latent_shape)}, "
                             f"got {None if targets is None else tuple(targets.shape)}")
        targets = targets.to(dtype)
        lep.eval()
        for note in cfg.advisories():
            warnings.warn(note, stacklevel=2)

    z = torch.stack([initial_noise(s, latent_shape, dtype) for s in seeds])
    null = [NULL_LABEL] * B
    ts = respaced_timesteps(sched.T, cfg.T)
    diags = [[] for _ in range(B)]

    for k in range(cfg.T, 0, -1):
        tick = time.perf_counter()
        t, t_prev = ts[k], ts[k - 1]
        window = guided and cfg.in_window(k)
        loss = grad = None
        if window:
            eps_c, loss, grad = similarity_gradient(backbone, lep, z, t, labels, targets, taps, cfg, sched.T)
        else:
            with torch.no_grad():
                if guided and record_loss:
                    eps_c, stack = features_for(backbone, z, t, labels, taps, cfg.p_max, cfg.normalize_t, sched.T)
                    loss = _batch_similarity(predict_edges(lep, stack), targets)
                else:
                    eps_c = backbone(z, torch.tensor([t]), backbone.label_index(labels))
        with torch.no_grad():
            if cfg.cfg_scale != 1:
                eps_u = backbone(z, torch.tensor([t]), backbone.label_index(null))
                eps = cfg_mix(eps_c, eps_u, cfg.cfg_scale)
            else:
                eps = eps_c
            z_next = ddim_step(z, eps, t, sched, t_prev, clip_x0=cfg.clip_denoised)

            alphas = [0.0] * B
            applied = [False] * B
            reasons = [None if window else ("outside window" if guided else "unguided")] * B
            if window:
                for b in range(B):
                    alpha = guidance_strength(z[b], z_next[b], grad[b], cfg.beta_strength, cfg.grad_eps)
                    if alpha is None:
                        reasons[b] = "gradient below grad_eps"
                        continue
                    if alpha == 0:
                        # zero strength means no correction; keep the DDIM result bit-exact
                        reasons[b] = "zero strength"
                        continue
                    z_next[b] = z_next[b] - alpha * grad[b]
                    alphas[b], applied[b] = float(alpha), True
            if not torch.isfinite(z_next).all():
                raise NumericalError(f"non-finite latent after step {k} (t={t})", step=k)
        z = z_next
        elapsed = time.perf_counter() - tick
        for b in range(B):
            diags[b].append(StepRecord(k, t, None if loss is None else float(loss[b]), alphas[b], applied[b],
                                       window, reasons[b], elapsed / B))

    with torch.no_grad():
        images = codec.decode(z)
    return [SampleResult(images[b], z[b], diags[b], seeds[b]) for b in range(B)]


def guided_sample(backbone, codec, model, sketch_latent: torch.Tensor, y, cfg: GuidanceConfig,
                  sched: NoiseSchedule, taps=None) -> SampleResult:
    """Single sketch-guided run seeded by ``cfg.seed``; ``sketch_latent`` is [C, H, W]."""
    if not torch.as_tensor(sketch_latent).any():
        raise InputError("sketch is empty; nothing to guide toward")
    return sample_batch(backbone, codec, model, sketch_latent.unsqueeze(0), y, [cfg.seed], cfg, sched,
                        guided=True, taps=taps)[0]


def unguided_sample(backbone, codec, y, cfg: GuidanceConfig, sched: NoiseSchedule) -> SampleResult:
    """Plain CFG + DDIM run (no edge predictor involved) seeded by ``cfg.seed``."""
    return sample_batch(backbone, codec, None, None, y, [cfg.seed], cfg, sched, guided=False)[0]


def diagnostics_lines(records, include_time: bool = False) -> str:
    out = []
    for r in records:
        row = asdict(r)
        if not include_time:
            row.pop("wall_time")
        out.append(json.dumps(row, sort_keys=True))
    return "\n".join(out) + "\n"
