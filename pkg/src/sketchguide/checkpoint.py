"""Versioned checkpoint container.

The file is a safetensors archive: an 8-byte little-endian header length, a
JSON header, then named row-major little-endian float32 blocks. Our own
metadata (architecture, tap registry, codec, provenance) rides in the
header's ``__metadata__`` map as one JSON document under a single key.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from .errors import IncompatibleError

FORMAT_NAME = "sketchguide-checkpoint"
FORMAT_VERSION = 1
HEADER_KEY = "sketchguide"


def save_checkpoint(path, tensors: dict, metadata: dict, kind: str) -> Path:
    path = Path(path)
    blocks = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        # np.ascontiguousarray would promote 0-d buffers to shape (1,)
        blocks[name] = np.array(value, dtype="<f4", order="C")
    # one metadata key only: safetensors writes this map in hash order, so
    # several keys would make otherwise identical files differ byte-wise
    header = {HEADER_KEY: json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind,
                                      "metadata": metadata}, sort_keys=True)}
    tmp = path.with_name(path.name + ".tmp")
    save_file(blocks, str(tmp), metadata=header)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(blocks, metadata)``; ``blocks`` maps names to float32 arrays."""
    path = Path(path)
    with safe_open(str(path), framework="numpy") as fh:
        raw = (fh.metadata() or {}).get(HEADER_KEY)
    header = json.loads(raw) if raw else {}
    if header.get("format") != FORMAT_NAME:
        raise IncompatibleError(f"{path} is not a {FORMAT_NAME} file")
    if int(header.get("version", -1)) > FORMAT_VERSION:
        raise IncompatibleError(f"{path} has format version {header['version']}, newer than {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise IncompatibleError(f"{path} holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    return load_file(str(path)), header["metadata"]


def state_to_blocks(module: torch.nn.Module) -> dict:
    return {k: v.detach().to(torch.float32) for k, v in module.state_dict().items()}


def blocks_to_state(module: torch.nn.Module, blocks: dict) -> None:
    reference = module.state_dict()
    missing = set(reference) - set(blocks)
    extra = set(blocks) - set(reference)
    if missing or extra:
        raise IncompatibleError(f"weight blocks mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    state = {}
    for k, ref in reference.items():
        arr = torch.from_numpy(np.array(blocks[k]))
        if tuple(arr.shape) != tuple(ref.shape):
            raise IncompatibleError(f"block {k!r} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}")
        state[k] = arr.to(ref.dtype)
    module.load_state_dict(state)
