"""Latent edge predictors: a convolutional U-Net and a per-pixel MLP baseline."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import ConfigError, IncompatibleError, InputError
from .features import FeatureLayout, FeatureStack

UNET_WIDTHS = (64, 128, 256, 512)
UNET_BOTTLENECK = 1024
MLP_HIDDEN = (512, 256, 128, 64)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=False),
    )


class UNetLEP(nn.Module):
    """Encoder levels of (conv, ReLU) x 2 + 2x2 max-pool, a two-conv
    bottleneck, a mirrored decoder with transposed-conv upsampling and
    concatenated skips, and a 3x3 output conv with no activation."""

    arch = "unet"

    def __init__(self, in_channels: int, out_channels: int = 1, widths=UNET_WIDTHS, bottleneck=UNET_BOTTLENECK):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.widths, self.bottleneck_width = tuple(widths), bottleneck
        self.down = nn.ModuleList()
        c = in_channels
        for w in self.widths:
            self.down.append(_double_conv(c, w))
            c = w
        self.bottleneck = _double_conv(c, bottleneck)
        c = bottleneck
        self.upsample = nn.ModuleList()
        self.up = nn.ModuleList()
        for w in reversed(self.widths):
            self.upsample.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.up.append(_double_conv(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, out_channels, 3, padding=1)

    @property
    def multiple(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % self.multiple or W % self.multiple:
            raise InputError(f"spatial dims must be divisible by {self.multiple}, got {H}x{W}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for upsample, block in zip(self.upsample, self.up):
            x = block(torch.cat([upsample(x), skips.pop()], dim=1))
        return self.head(x)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "widths": list(self.widths), "bottleneck": self.bottleneck_width}


class MLPLEP(nn.Module):
    """Per-pixel MLP: Linear -> ReLU -> BatchNorm for each hidden width, then a linear output.

    Linear layers act on each pixel's channel vector independently (1x1 convs).
    """

    arch = "mlp"

    def __init__(self, in_channels: int, out_channels: int = 1, hidden=MLP_HIDDEN):
        super().__init__()
        self.in_channels, self.out_channels, self.hidden = in_channels, out_channels, tuple(hidden)
        layers = []
        c = in_channels
        for h in self.hidden:
            layers += [nn.Conv2d(c, h, 1), nn.ReLU(), nn.BatchNorm2d(h)]
            c = h
        layers.append(nn.Conv2d(c, out_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "hidden": list(self.hidden)}


def build_lep(arch: str, in_channels: int, out_channels: int = 1, **kwargs) -> nn.Module:
    if arch == "unet":
        return UNetLEP(in_channels, out_channels, **kwargs)
    if arch == "mlp":
        return MLPLEP(in_channels, out_channels, **kwargs)
    raise ConfigError(f"unknown LEP architecture {arch!r}; expected 'unet' or 'mlp'")


def predict_edges(model: nn.Module, stack: FeatureStack) -> torch.Tensor:
    """Edge-map estimate in latent shape for a [C_F, H, W] or batched stack."""
    data = stack.data
    if data.shape[-3] != model.in_channels:
        raise IncompatibleError(
            f"feature stack has {data.shape[-3]} channels but the predictor expects {model.in_channels}")
    expected = getattr(model, "layout", None)
    if expected is not None:
        expected.check_compatible(stack.layout)
    if data.ndim == 3:
        return model(data.unsqueeze(0))[0]
    return model(data)


@dataclass
class LocalityReport:
    pixel: tuple
    max_change: float
    local: bool

    @property
    def verdict(self) -> str:
        return "local" if self.local else "non-local"


def locality_probe(model: nn.Module, stack: FeatureStack, pixel, magnitude: float = 1.0, seed: int = 0,
                   atol: float = 0.0) -> LocalityReport:
    """Perturb every pixel except ``pixel`` and report whether the output there moved."""
    i, j = pixel
    data = stack.data if stack.data.ndim == 4 else stack.data.unsqueeze(0)
    H, W = data.shape[-2:]
    if not (0 <= i < H and 0 <= j < W):
        raise InputError(f"pixel {pixel} outside {H}x{W}")
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(data.shape, generator=g, dtype=data.dtype) * magnitude
    noise[..., i, j] = 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        base = model(data)[..., i, j]
        moved = model(data + noise)[..., i, j]
    model.train(was_training)
    change = float((moved - base).abs().max())
    return LocalityReport((i, j), change, change <= atol)


def save_lep(model: nn.Module, path, layout: FeatureLayout, provenance=None):
    meta = {"arch": model.arch, "config": model.config(), "layout": layout.to_dict(),
            "provenance": provenance or {}}
    return ckpt.save_checkpoint(path, ckpt.state_to_blocks(model), meta, kind="lep")


def load_lep(path, expected_layout: FeatureLayout | None = None):
    """Load an LEP checkpoint in eval mode; validates the stored layout if given."""
    blocks, meta = ckpt.load_checkpoint(path, kind="lep")
    cfg = dict(meta["config"])
    arch = meta["arch"]
    if arch == "unet":
        model = UNetLEP(cfg["in_channels"], cfg["out_channels"], cfg["widths"], cfg["bottleneck"])
    elif arch == "mlp":
        model = MLPLEP(cfg["in_channels"], cfg["out_channels"], cfg["hidden"])
    else:
        raise IncompatibleError(f"unknown LEP architecture {arch!r} in {path}")
    ckpt.blocks_to_state(model, blocks)
    model.layout = FeatureLayout.from_dict(meta["layout"])
    if expected_layout is not None:
        expected_layout.check_compatible(model.layout)
    model.eval()
    return model, meta
