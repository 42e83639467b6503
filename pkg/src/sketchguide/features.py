"""Feature stack assembly: resized tap activations + noise level + its encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import IncompatibleError, InputError


def positional_encoding(t, p_max: int) -> np.ndarray:
    """Entries sin(2*pi*t*2^-i) for i = 0..p_max, with ``t`` used as given."""
    return np.array([math.sin(2 * math.pi * t * 2.0 ** -i) for i in range(p_max + 1)], dtype=np.float64)


def resize_activation(a: torch.Tensor, target) -> torch.Tensor:
    """Bilinear (corner-aligned) spatial resize of a [c, h, w] or [B, c, h, w] map."""
    H, W = target
    if tuple(a.shape[-2:]) == (H, W):
        return a
    batched = a.ndim == 4
    out = F.interpolate(a if batched else a.unsqueeze(0), size=(H, W), mode="bilinear", align_corners=True)
    return out if batched else out[0]


@dataclass(frozen=True)
class FeatureLayout:
    """Channel ranges of a feature stack, as (source name, start, stop) triples."""

    blocks: tuple

    @property
    def channels(self) -> int:
        return self.blocks[-1][2] if self.blocks else 0

    def range_of(self, name):
        for n, a, b in self.blocks:
            if n == name:
                return a, b
        raise KeyError(name)

    def slice(self, data: torch.Tensor, name) -> torch.Tensor:
        a, b = self.range_of(name)
        return data[..., a:b, :, :]

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks]}

    @classmethod
    def from_dict(cls, d) -> "FeatureLayout":
        return cls(tuple((str(n), int(a), int(b)) for n, a, b in d["blocks"]))

    @classmethod
    def build(cls, tap_channels, p_max: int) -> "FeatureLayout":
        """``tap_channels`` is an ordered sequence of (site name, channel count)."""
        blocks, c = [], 0
        for name, n in tap_channels:
            blocks.append((name, c, c + n))
            c += n
        blocks.append(("t", c, c + 1))
        blocks.append(("p", c + 1, c + 2 + p_max))
        return cls(tuple(blocks))

    def check_compatible(self, other: "FeatureLayout") -> None:
        if self.blocks != other.blocks:
            raise IncompatibleError(f"feature layout mismatch: expected {self.blocks}, got {other.blocks}")


@dataclass
class FeatureStack:
    data: torch.Tensor
    layout: FeatureLayout


def assemble_feature_stack(activations, t, p_max: int, target, names=None, normalize_t: bool = False,
                           T: int | None = None) -> FeatureStack:
    """Concatenate resized activations, a constant t channel and p_max+1 encoding channels.

    ``activations`` are all [c, h, w] (result [C_F, H, W]) or all
    [B, c, h, w] (result [B, C_F, H, W]). In the batched case ``t`` may be an
    int or a length-B tensor. With ``normalize_t`` the value t/T replaces the
    raw step index in both the t channel and the encoding.
    """
    if not activations:
        raise InputError("feature stack needs at least one activation")
    batched = activations[0].ndim == 4
    H, W = target
    ref = activations[0]
    B = ref.shape[0] if batched else 1
    names = list(names) if names is not None else [f"l{i + 1}" for i in range(len(activations))]
    if len(names) != len(activations):
        raise InputError("one name per activation required")

    resized = [resize_activation(a, (H, W)) for a in activations]
    if not batched:
        resized = [r.unsqueeze(0) for r in resized]

    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(B)
    if normalize_t:
        if not T:
            raise InputError("normalize_t requires the schedule length T")
        tt = tt / T
    enc = torch.from_numpy(np.stack([positional_encoding(float(v), p_max) for v in tt]))
    cond = torch.cat([tt[:, None], enc], dim=1).to(dtype=ref.dtype, device=ref.device)
    cond = cond[:, :, None, None].expand(B, p_max + 2, H, W)

    data = torch.cat(resized + [cond], dim=1)
    layout = FeatureLayout.build([(n, a.shape[-3]) for n, a in zip(names, activations)], p_max)
    return FeatureStack(data if batched else data[0], layout)
