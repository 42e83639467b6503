"""Named random substreams derived from one run seed.

Every consumer of randomness asks for its own purpose-named stream, so adding
a new consumer never shifts the draws of an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit seed for ``purpose`` under the run seed ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(purpose.encode()),))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)


def numpy_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))


def torch_generator(seed: int, purpose: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, purpose))
    return g
