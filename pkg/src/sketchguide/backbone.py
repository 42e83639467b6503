"""Conditional denoiser with named activation taps, latent codecs and CFG mixing.

The toy denoiser is a small pixel-space U-Net for single-channel square
images. Its named submodules double as tap sites: ``enc0..enc{L-1}`` (one per
encoder level), ``mid0..mid{M-1}`` (bottleneck blocks) and ``dec{L-1}..dec0``
(one per decoder level, listed in execution order).
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import ConfigError, InputError
from .schedule import NoiseSchedule, add_noise
from .seeding import torch_generator

SHAPE_LABELS = ("circle", "rectangle", "triangle")
NULL_LABEL = None


@dataclass(frozen=True)
class TapSet:
    """Ordered tap-site identifiers; order defines the feature-stack layout."""

    sites: tuple

    def __post_init__(self):
        sites = tuple(self.sites)
        if not sites:
            raise ConfigError("a TapSet needs at least one site")
        if len(set(sites)) != len(sites):
            raise ConfigError(f"duplicate tap sites in {sites}")
        object.__setattr__(self, "sites", sites)

    def __len__(self):
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)


class IdentityCodec:
    """Pixel-space codec: encode and decode are exact identities."""

    name = "identity"

    def __init__(self, channels: int = 1):
        self.channels = channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def to_dict(self) -> dict:
        return {"name": self.name, "channels": self.channels}


def codec_from_dict(d: dict) -> IdentityCodec:
    if d.get("name") != "identity":
        raise ConfigError(f"unsupported codec {d.get('name')!r}")
    return IdentityCodec(int(d["channels"]))


@dataclass(frozen=True)
class StableDiffusionAdapterSpec:
    """Tap layout for wrapping an SD-1.5 style UNet (latent space, 4 channels).

    Site names follow the original LDM module naming. Not executable here;
    it records the configuration an adapter would register.
    """

    taps: TapSet = TapSet((
        "input_blocks.2", "input_blocks.4", "input_blocks.8",
        "middle_block.0", "middle_block.1", "middle_block.2",
        "output_blocks.2", "output_blocks.4", "output_blocks.8",
    ))
    latent_channels: int = 4
    latent_downsample: int = 8


@dataclass
class BackboneConfig:
    image_size: int = 32
    channels: int = 1
    widths: tuple = (8, 16, 32)
    mid_blocks: int = 3
    emb_dim: int = 64
    groups: int = 4
    labels: tuple = SHAPE_LABELS

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.labels = tuple(self.labels)
        if not self.widths or self.mid_blocks < 1:
            raise ConfigError("backbone needs at least one level and one mid block")
        if self.image_size % (2 ** (len(self.widths) - 1)):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{len(self.widths) - 1}")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by group count {self.groups}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ToyDenoiser(nn.Module):
    """eps_theta(z_t | t, y) for [B, C, S, S] inputs with a class-label condition."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        self.null_index = len(cfg.labels)
        self.label_emb = nn.Embedding(len(cfg.labels) + 1, cfg.emb_dim)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim))
        self.stem = nn.Conv2d(cfg.channels, cfg.widths[0], 3, padding=1)

        self.enc = nn.ModuleList()
        cin = cfg.widths[0]
        for w in cfg.widths:
            self.enc.append(ResBlock(cin, w, cfg.emb_dim, cfg.groups))
            cin = w
        self.mid = nn.ModuleList(ResBlock(cin, cin, cfg.emb_dim, cfg.groups) for _ in range(cfg.mid_blocks))
        # dec[i] pairs with enc[i]; executed from the deepest level up
        self.dec = nn.ModuleList()
        for i, w in enumerate(cfg.widths):
            below = cfg.widths[i + 1] if i + 1 < len(cfg.widths) else cfg.widths[-1]
            self.dec.append(ResBlock(below + w, w, cfg.emb_dim, cfg.groups))
        self.out_norm = nn.GroupNorm(cfg.groups, cfg.widths[0])
        self.out = nn.Conv2d(cfg.widths[0], cfg.channels, 3, padding=1)

    # tap registry ---------------------------------------------------------
    def tap_sites(self) -> dict:
        """Ordered mapping of tap-site name to submodule, in execution order."""
        L = len(self.config.widths)
        sites = {f"enc{i}": self.enc[i] for i in range(L)}
        sites.update({f"mid{i}": m for i, m in enumerate(self.mid)})
        sites.update({f"dec{i}": self.dec[i] for i in reversed(range(L))})
        return sites

    def default_taps(self) -> TapSet:
        return TapSet(tuple(self.tap_sites()))

    def tap_table(self) -> dict:
        """Per-site (channels, height, width) of the captured activation."""
        cfg = self.config
        L = len(cfg.widths)
        table = {}
        for i, w in enumerate(cfg.widths):
            s = cfg.image_size // 2 ** i
            table[f"enc{i}"] = (w, s, s)
            table[f"dec{i}"] = (w, s, s)
        bottom = cfg.image_size // 2 ** (L - 1)
        for i in range(cfg.mid_blocks):
            table[f"mid{i}"] = (cfg.widths[-1], bottom, bottom)
        return {k: table[k] for k in self.tap_sites()}

    def label_index(self, y) -> torch.Tensor:
        if isinstance(y, torch.Tensor):
            if y.dtype != torch.long or y.numel() == 0 or y.min() < 0 or y.max() > self.null_index:
                raise InputError(f"label indices must be integers in [0, {self.null_index}]")
            return y.reshape(-1)
        labels = y if isinstance(y, (list, tuple)) else [y]
        out = []
        for lab in labels:
            if lab is NULL_LABEL:
                out.append(self.null_index)
            elif isinstance(lab, str) and lab in self.config.labels:
                out.append(self.config.labels.index(lab))
            elif isinstance(lab, (int, np.integer)) and not isinstance(lab, bool) and 0 <= lab <= self.null_index:
                out.append(int(lab))
            else:
                raise InputError(f"unknown condition label {lab!r}; vocabulary is {self.config.labels}")
        return torch.tensor(out, dtype=torch.long)

    def forward(self, z, t, y_index):
        cfg = self.config
        if z.ndim != 4 or tuple(z.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise InputError(
                f"latent shape {tuple(z.shape)} does not match backbone input "
                f"[B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}]")
        B = z.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if y_index.numel() == 1:
            y_index = y_index.expand(B)
        emb = self.time_mlp(timestep_embedding(t, cfg.emb_dim).to(z.dtype)) + self.label_emb(y_index)

        h = self.stem(z)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            skips.append(h)
            if i + 1 < len(self.enc):
                h = F.avg_pool2d(h, 2)
        for block in self.mid:
            h = block(h, emb)
        for i in reversed(range(len(self.dec))):
            if h.shape[-1] != skips[i].shape[-1]:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


@contextmanager
def capture_taps(model: ToyDenoiser, taps: TapSet):
    """Register forward hooks for ``taps``; yields the dict they fill."""
    sites = model.tap_sites()
    unknown = [s for s in taps if s not in sites]
    if unknown:
        raise ConfigError(f"unknown tap site(s) {unknown}; available: {list(sites)}")
    captured = {}
    handles = []
    for name in taps:
        def hook(_module, _inputs, output, name=name):
            captured[name] = output
        handles.append(sites[name].register_forward_hook(hook))
    try:
        yield captured
    finally:
        for h in handles:
            h.remove()


def denoise_with_taps(model: ToyDenoiser, z_t: torch.Tensor, t, y, taps: TapSet):
    """Run eps_theta and return ``(eps_hat, activations)`` in tap order.

    Accepts a single latent [C, H, W] or a batch [B, C, H, W]; activations
    follow the same convention. The returned activations are the tensors
    produced during this pass (still attached to the autograd graph), never
    shared buffers, so a later pass cannot alter them.
    """
    single = z_t.ndim == 3
    z = z_t.unsqueeze(0) if single else z_t
    y_index = model.label_index(y)
    if not isinstance(t, torch.Tensor):
        t = torch.tensor([int(t)])
    with capture_taps(model, taps) as captured:
        eps = model(z, t, y_index)
    acts = [captured[s] for s in taps]
    if single:
        return eps[0], [a[0] for a in acts]
    return eps, acts


def cfg_mix(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance mix: eps_u + w * (eps_c - eps_u)."""
    if eps_cond.shape != eps_uncond.shape:
        raise InputError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if w < 0:
        raise InputError(f"guidance scale must be >= 0, got {w}")
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, v in model.state_dict().items():
        h.update(name.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# training -----------------------------------------------------------------

def _denoising_loss(model, x0, labels, sched, gen):
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    z = add_noise(x0, t, eps, sched)
    return F.mse_loss(model(z, t, labels), eps)


def train_toy_backbone(images, labels, sched: NoiseSchedule, epochs: int, condition_drop_rate: float = 0.1,
                       config: BackboneConfig | None = None, lr: float = 2e-3, batch_size: int = 32,
                       seed: int = 0, holdout_fraction: float = 0.1, log=None):
    """Denoising score-matching training of a :class:`ToyDenoiser`.

    ``images`` is a float tensor [N, C, S, S] already in latent space and
    ``labels`` a sequence of label names. Labels are replaced by the null
    label with probability ``condition_drop_rate`` so CFG has an
    unconditional branch to use.

    Returns ``(model, info)`` where ``info`` has the loss history, held-out
    losses before and after, and whether CFG is reliable.
    """
    if len(images) == 0:
        raise InputError("cannot train a backbone on an empty dataset")
    if not 0 <= condition_drop_rate <= 1:
        raise ConfigError(f"condition_drop_rate must be in [0, 1], got {condition_drop_rate}")
    torch.manual_seed(seed)
    model = ToyDenoiser(config or BackboneConfig(image_size=images.shape[-1], channels=images.shape[1]))
    y_all = model.label_index(list(labels))

    n = images.shape[0]
    n_hold = int(round(n * holdout_fraction)) if n > 1 else 0
    perm = torch.randperm(n, generator=torch_generator(seed, "backbone/split"))
    hold, train = perm[:n_hold], perm[n_hold:]

    def heldout_loss():
        if n_hold == 0:
            return None
        model.eval()
        with torch.no_grad():
            loss = _denoising_loss(model, images[hold], y_all[hold], sched, torch_generator(seed, "backbone/heldout"))
        return float(loss)

    info = {"loss_history": [], "heldout_initial": heldout_loss(), "epochs": int(epochs), "lr": lr,
            "batch_size": batch_size, "seed": int(seed), "condition_drop_rate": float(condition_drop_rate),
            "cfg_reliable": condition_drop_rate > 0}
    if epochs > 0:
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        order_gen = torch_generator(seed, "backbone/data_order")
        noise_gen = torch_generator(seed, "backbone/noise")
        drop_gen = torch_generator(seed, "backbone/label_drop")
        for epoch in range(epochs):
            model.train()
            order = train[torch.randperm(len(train), generator=order_gen)]
            total, count = 0.0, 0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                y = y_all[idx].clone()
                drop = torch.rand(len(idx), generator=drop_gen) < condition_drop_rate
                y[drop] = model.null_index
                loss = _denoising_loss(model, images[idx], y, sched, noise_gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            info["loss_history"].append(total / count)
            if log:
                log(f"backbone epoch {epoch + 1}/{epochs} loss {total / count:.4f}")
    info["heldout_final"] = heldout_loss()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.train_info = info
    return model, info


# persistence --------------------------------------------------------------

def save_backbone(model: ToyDenoiser, path, codec=None, schedule: NoiseSchedule | None = None, provenance=None):
    codec = codec or IdentityCodec(model.config.channels)
    meta = {
        "architecture": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "taps": {"sites": list(model.default_taps()), "table": {k: list(v) for k, v in model.tap_table().items()}},
        "codec": codec.to_dict(),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "provenance": provenance if provenance is not None else getattr(model, "train_info", {}),
    }
    return ckpt.save_checkpoint(path, ckpt.state_to_blocks(model), meta, kind="backbone")


def load_backbone(path):
    """Return ``(model, codec, metadata)`` with the model frozen in eval mode."""
    blocks, meta = ckpt.load_checkpoint(path, kind="backbone")
    model = ToyDenoiser(BackboneConfig(**meta["architecture"]))
    ckpt.blocks_to_state(model, blocks)
    stored = meta["taps"]["sites"]
    if stored != list(model.default_taps()):
        raise ConfigError(f"checkpoint tap registry {stored} does not match architecture")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.train_info = meta.get("provenance", {})
    return model, codec_from_dict(meta["codec"]), meta
