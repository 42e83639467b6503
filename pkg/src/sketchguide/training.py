"""Self-supervised training of latent edge predictors on (image, edge, label) triplets."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .backbone import TapSet, denoise_with_taps, weights_digest
from .errors import ConfigError, IncompatibleError, InputError
from .features import FeatureLayout, assemble_feature_stack
from .schedule import NoiseSchedule, add_noise
from .seeding import torch_generator


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    p_max: int = 9
    normalize_t: bool = False
    holdout_fraction: float = 0.0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid training config {self}")
        if self.p_max < 0:
            raise ConfigError("p_max must be >= 0")


def edge_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of the squared channel-vector distance (sum of squared differences)."""
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum()


def feature_layout_for(backbone, taps: TapSet, p_max: int) -> FeatureLayout:
    table = backbone.tap_table()
    return FeatureLayout.build([(s, table[s][0]) for s in taps], p_max)


def check_compatibility(model, backbone, taps: TapSet, p_max: int) -> FeatureLayout:
    layout = feature_layout_for(backbone, taps, p_max)
    if layout.channels != model.in_channels:
        raise IncompatibleError(
            f"backbone taps give a {layout.channels}-channel feature stack but the predictor "
            f"expects {model.in_channels}")
    stored = getattr(model, "layout", None)
    if stored is not None:
        stored.check_compatible(layout)
    return layout


def sample_noise_levels(gen: torch.Generator, n: int, T: int) -> torch.Tensor:
    """Uniform integer steps in [1, T]."""
    return torch.randint(1, T + 1, (n,), generator=gen)


def triplets_to_tensors(data, codec):
    x = torch.from_numpy(np.stack([tr.x for tr in data])).float().unsqueeze(1)
    e = torch.from_numpy(np.stack([tr.e for tr in data])).float().unsqueeze(1)
    return codec.encode(x), codec.encode(e), [tr.y for tr in data]


def features_for(backbone, z_t, t, labels, taps, p_max, normalize_t=False, T=None):
    """Backbone forward + feature assembly; returns ``(eps_hat, FeatureStack)``."""
    eps, acts = denoise_with_taps(backbone, z_t, t, labels, taps)
    stack = assemble_feature_stack(acts, t, p_max, tuple(z_t.shape[-2:]), names=list(taps),
                                   normalize_t=normalize_t, T=T)
    return eps, stack


def train_lep(model, backbone, codec, data, sched: NoiseSchedule, cfg: TrainConfig, taps: TapSet | None = None,
              log=None):
    """Fit ``model`` to predict encoded edge maps from denoiser features.

    Each example draws t ~ U[1, T] and a fresh noise sample, noises the
    encoded image, runs the frozen backbone, assembles the feature stack and
    regresses the encoded edge map. Returns ``(model, history)``; history
    holds the per-epoch mean of the per-example loss (and held-out loss when
    early stopping is configured).
    """
    if not data:
        raise InputError("cannot train on an empty dataset")
    taps = taps or backbone.default_taps()
    layout = check_compatibility(model, backbone, taps, cfg.p_max)
    model.layout = layout
    torch.manual_seed(cfg.seed)

    x_all, e_all, labels = triplets_to_tensors(data, codec)
    if x_all.shape[1:] != (backbone.config.channels, backbone.config.image_size, backbone.config.image_size):
        raise InputError(f"triplet latent shape {tuple(x_all.shape[1:])} does not match the backbone input")
    y_all = backbone.label_index(labels)

    n = len(data)
    n_hold = int(round(n * cfg.holdout_fraction)) if cfg.patience else 0
    perm = torch.randperm(n, generator=torch_generator(cfg.seed, "lep/split"))
    hold, train = perm[:n_hold], perm[n_hold:]

    frozen = [p.requires_grad for p in backbone.parameters()]
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone_mode = backbone.training
    backbone.eval()
    digest_before = weights_digest(backbone)

    def batch_loss(idx, gen):
        t = sample_noise_levels(gen, len(idx), sched.T)
        eps = torch.randn(x_all[idx].shape, generator=gen)
        z_t = add_noise(x_all[idx], t, eps, sched)
        with torch.no_grad():
            _, stack = features_for(backbone, z_t, t, y_all[idx], taps, cfg.p_max, cfg.normalize_t, sched.T)
        pred = model(stack.data)
        return edge_loss(pred, e_all[idx]) / len(idx)

    history = {"loss": [], "heldout": [], "config": asdict(cfg)}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    order_gen = torch_generator(cfg.seed, "lep/data_order")
    noise_gen = torch_generator(cfg.seed, "lep/noise")
    best, best_state, stale = float("inf"), None, 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = train[torch.randperm(len(train), generator=order_gen)]
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss = batch_loss(idx, noise_gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history["loss"].append(total / count)
            msg = f"lep epoch {epoch + 1}/{cfg.epochs} loss {total / count:.4f}"
            if n_hold:
                model.eval()
                with torch.no_grad():
                    held = float(batch_loss(hold, torch_generator(cfg.seed, "lep/heldout")))
                history["heldout"].append(held)
                msg += f" heldout {held:.4f}"
                if held < best:
                    best, stale = held, 0
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
            if log:
                log(msg)
            if n_hold and stale >= cfg.patience:
                break
    finally:
        for p, flag in zip(backbone.parameters(), frozen):
            p.requires_grad_(flag)
        backbone.train(backbone_mode)
    if best_state is not None:
        model.load_state_dict(best_state)
    if weights_digest(backbone) != digest_before:
        raise RuntimeError("backbone weights changed during LEP training")
    model.eval()
    return model, history
