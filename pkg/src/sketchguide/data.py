"""Synthetic shape triplets, edge extraction, binarization and sketch simplification."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import thin

from .backbone import SHAPE_LABELS
from .errors import ConfigError, InputError
from .seeding import numpy_rng

PROVENANCES = ("hand-drawn", "extracted", "synthetic", "simplified")
INDEX_FILE = "index.csv"
MANIFEST_FILE = "manifest.json"


@dataclass
class SketchImage:
    data: np.ndarray
    provenance: str = "hand-drawn"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise InputError(f"sketch must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise InputError("sketch values must be 0 or 1")
        self.data = arr.astype(np.uint8)
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")

    @property
    def is_empty(self) -> bool:
        return not self.data.any()

    @property
    def usable(self) -> bool:
        """Whether the sketch can serve as a guidance target."""
        return not self.is_empty

    def require_usable(self):
        if self.is_empty:
            raise InputError("sketch has no nonzero pixels and cannot be used for guidance")
        return self


@dataclass
class ShapeSpec:
    kind: str
    center: tuple
    size: float
    rotation: float = 0.0
    fill: float = 1.0
    background: float = 0.0
    aspect: float = 1.0

    @property
    def label(self) -> str:
        return self.kind

    def vertices(self) -> np.ndarray:
        cy, cx = self.center
        if self.kind == "rectangle":
            base = np.array([[-1, -1], [-1, 1], [1, 1], [1, -1]], dtype=float) * [self.size, self.size * self.aspect]
        elif self.kind == "triangle":
            ang = np.array([-math.pi / 2, math.pi / 6, 5 * math.pi / 6])
            base = np.stack([np.sin(ang), np.cos(ang)], axis=1) * self.size
        else:
            raise InputError(f"{self.kind} has no vertices")
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return base @ rot.T + [cy, cx]


def _validate_spec(spec: ShapeSpec, dims):
    H, W = dims
    if spec.kind not in SHAPE_LABELS:
        raise InputError(f"unknown shape kind {spec.kind!r}")
    if not spec.size > 0 or (spec.kind == "rectangle" and not spec.aspect > 0):
        raise InputError(f"degenerate {spec.kind}: size {spec.size}")
    for name in ("fill", "background"):
        v = getattr(spec, name)
        if not 0 <= v <= 1:
            raise InputError(f"{name} intensity {v} outside [0, 1]")
    if spec.fill == spec.background:
        raise InputError("fill and background intensities must differ")
    cy, cx = spec.center
    if spec.kind == "circle":
        lo = np.array([cy - spec.size, cx - spec.size])
        hi = np.array([cy + spec.size, cx + spec.size])
    else:
        v = spec.vertices()
        lo, hi = v.min(axis=0), v.max(axis=0)
    # one-pixel margin so every contour pixel has background neighbours
    if lo[0] < 1 or lo[1] < 1 or hi[0] > H - 2 or hi[1] > W - 2:
        raise InputError(f"{spec.kind} at {spec.center} size {spec.size} does not fit inside {H}x{W}")


def shape_mask(spec: ShapeSpec, dims) -> np.ndarray:
    """Pixel-centre inclusion mask of the filled shape."""
    _validate_spec(spec, dims)
    H, W = dims
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    cy, cx = spec.center
    tol = 1e-9
    if spec.kind == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= spec.size ** 2 + tol
    elif spec.kind == "rectangle":
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        dy, dx = yy - cy, xx - cx
        u = c * dy + s * dx
        v = -s * dy + c * dx
        mask = (np.abs(u) <= spec.size + tol) & (np.abs(v) <= spec.size * spec.aspect + tol)
    else:
        vert = spec.vertices()
        mask = np.ones((H, W), dtype=bool)
        for k in range(3):
            (y0, x0), (y1, x1) = vert[k], vert[(k + 1) % 3]
            oy, ox = vert[(k + 2) % 3]
            side = lambda py, px: (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            sign = np.sign(side(oy, ox))
            mask &= side(yy, xx) * sign >= -tol
    if not mask.any():
        raise InputError(f"degenerate {spec.kind}: no pixel centres inside")
    return mask


def contour_of(mask: np.ndarray) -> np.ndarray:
    """Inner boundary: filled pixels with at least one 4-neighbour outside."""
    cross = ndimage.generate_binary_structure(2, 1)
    return (mask & ~ndimage.binary_erosion(mask, cross, border_value=0)).astype(np.uint8)


def render_shape(spec: ShapeSpec, dims=(32, 32)):
    """Return ``(image, edge_map)``: float image in [0, 1] and a 1-pixel binary contour."""
    mask = shape_mask(spec, dims)
    image = np.where(mask, spec.fill, spec.background).astype(np.float64)
    return image, contour_of(mask)


def render_sketch(spec: ShapeSpec, dims=(32, 32), stroke: int = 3) -> SketchImage:
    """Hand-drawn-style sketch: the contour thickened to ``stroke`` pixels."""
    edge = contour_of(shape_mask(spec, dims)).astype(bool)
    if stroke > 1:
        edge = ndimage.binary_dilation(edge, np.ones((stroke, stroke), dtype=bool))
    return SketchImage(edge.astype(np.uint8), "synthetic")


def random_shape_spec(rng: np.random.Generator, dims=(32, 32), kind: str | None = None,
                      size_range=(5.0, 11.0), min_contrast: float = 0.4) -> ShapeSpec:
    H, W = dims
    kind = kind or SHAPE_LABELS[rng.integers(len(SHAPE_LABELS))]
    hi = min(size_range[1], (min(H, W) - 3) / 2)
    lo = min(size_range[0], hi)
    while True:
        size = float(rng.uniform(lo, hi))
        rotation = float(rng.uniform(0, 2 * math.pi)) if kind != "circle" else 0.0
        aspect = float(rng.uniform(0.6, 1.0)) if kind == "rectangle" else 1.0
        fill, background = (float(v) for v in rng.uniform(0, 1, 2))
        if abs(fill - background) < min_contrast:
            continue
        spec = ShapeSpec(kind, (0.0, 0.0), size, rotation, fill, background, aspect)
        # bound the extent, then place the centre so the shape fits
        if kind == "circle":
            ey = ex = size
        else:
            v = spec.vertices()
            ey, ex = np.abs(v).max(axis=0)
        if 2 * ey > H - 3 or 2 * ex > W - 3:
            continue
        cy = float(rng.uniform(1 + ey, H - 2 - ey))
        cx = float(rng.uniform(1 + ex, W - 2 - ex))
        spec.center = (cy, cx)
        try:
            _validate_spec(spec, dims)
        except InputError:
            continue
        return spec


# edge extraction ----------------------------------------------------------

def sobel_edges(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude of a Sobel filter, scaled so the strongest response is 1."""
    img = np.asarray(image, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(img, axis=0, mode="nearest"), ndimage.sobel(img, axis=1, mode="nearest"))
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros_like(img)
    return mag / peak


def precomputed_edges(image: np.ndarray) -> np.ndarray:
    """Pass-through for inputs that already are edge responses (e.g. from an external detector)."""
    return np.asarray(image, dtype=np.float64)


EDGE_EXTRACTORS = {"sobel": sobel_edges, "precomputed": precomputed_edges}


def register_edge_extractor(name: str, fn) -> None:
    """Plug in an external extractor (e.g. a learned edge network) under ``name``."""
    EDGE_EXTRACTORS[name] = fn


def extract_edges(image, extractor="sobel") -> np.ndarray:
    fn = extractor if callable(extractor) else EDGE_EXTRACTORS.get(extractor)
    if fn is None:
        raise ConfigError(f"unknown edge extractor {extractor!r}; available: {sorted(EDGE_EXTRACTORS)}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a grayscale [H, W] image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise InputError("image intensities must lie in [0, 1]")
    return np.clip(fn(img), 0.0, 1.0)


def binarize(response, threshold: float = 0.5, provenance: str = "extracted") -> SketchImage:
    """Pixel is 1 iff response >= threshold (inclusive tie rule)."""
    if not 0 < threshold < 1:
        raise InputError(f"threshold must lie in (0, 1), got {threshold}")
    return SketchImage((np.asarray(response) >= threshold).astype(np.uint8), provenance)


# simplification -----------------------------------------------------------

def _closed(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 2)
    return ndimage.binary_closing(padded, np.ones((3, 3), dtype=bool))[2:-2, 2:-2]


def _is_thin(mask: np.ndarray) -> bool:
    """No 2x2 block is fully set, i.e. every stroke is one pixel wide."""
    return not (mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]).any()


def morphological_simplifier(mask: np.ndarray, max_iter: int = 16) -> np.ndarray:
    """Close small gaps, thin to 1-pixel strokes; repeated until nothing changes.

    Input that is already thin and gap-free is returned as is.
    """
    cur = mask.astype(bool)
    for _ in range(max_iter):
        closed = _closed(cur)
        if _is_thin(cur) and np.array_equal(closed, cur):
            break
        nxt = thin(closed)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    return cur


SIMPLIFIERS = {"morphological": morphological_simplifier}


def register_simplifier(name: str, fn) -> None:
    SIMPLIFIERS[name] = fn


def simplify_sketch(sketch: SketchImage, simplifier="morphological") -> SketchImage:
    fn = simplifier if callable(simplifier) else SIMPLIFIERS.get(simplifier)
    if fn is None:
        raise ConfigError(f"unknown simplifier {simplifier!r}; available: {sorted(SIMPLIFIERS)}")
    if sketch.is_empty:
        raise InputError("cannot simplify an empty sketch")
    out = np.asarray(fn(sketch.data.astype(bool))) > 0
    return SketchImage(out.astype(np.uint8), "simplified")


# raster I/O ---------------------------------------------------------------

def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_gray(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as an 8-bit grayscale PNG."""
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    atomic_write(path, _png_bytes(arr))


def save_binary(path, mask: np.ndarray) -> None:
    atomic_write(path, _png_bytes((np.asarray(mask) > 0).astype(np.uint8) * 255))


def load_gray(path) -> np.ndarray:
    """Read a raster (grayscale or RGB) as floats in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_edge_map(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise InputError(f"edge map {path} must contain only pixel values 0 and 255")
    return (arr == 255).astype(np.uint8)


def load_sketch(path) -> SketchImage:
    """Read a user sketch; stroke polarity is inferred as the minority value."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bright = arr >= 128
    strokes = bright if bright.sum() <= (~bright).sum() else ~bright
    return SketchImage(strokes.astype(np.uint8), "hand-drawn")


# triplet datasets ---------------------------------------------------------

@dataclass
class Triplet:
    x: np.ndarray
    e: np.ndarray
    y: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.e = np.asarray(self.e)
        if self.x.shape != self.e.shape:
            raise InputError(f"image shape {self.x.shape} != edge shape {self.e.shape}")
        if not np.isin(self.e, (0, 1)).all():
            raise InputError("edge map values must be 0 or 1")


def generate_triplets(n: int, dims=(32, 32), seed: int = 0) -> list:
    """In-memory variant of :func:`build_triplet_dataset`."""
    if n < 1:
        raise InputError(f"dataset size must be >= 1, got {n}")
    kinds = [SHAPE_LABELS[i % len(SHAPE_LABELS)] for i in range(n)]
    numpy_rng(seed, "data/kinds").shuffle(kinds)
    out = []
    for i, kind in enumerate(kinds):
        spec = random_shape_spec(numpy_rng(seed, f"data/spec/{i}"), dims, kind)
        image, edge = render_shape(spec, dims)
        out.append(Triplet(image, edge, kind, {"spec": spec}))
    return out


def build_triplet_dataset(n: int, dims, seed: int, out_dir) -> Path:
    """Write ``n`` triplets as PNG pairs plus ``index.csv`` and a manifest."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "edges").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    triplets = generate_triplets(n, dims, seed)
    rows = []
    for i, tr in enumerate(triplets):
        img_rel, edge_rel = f"images/{i:05d}.png", f"edges/{i:05d}.png"
        save_gray(out_dir / img_rel, tr.x)
        save_binary(out_dir / edge_rel, tr.e)
        rows.append((img_rel, edge_rel, tr.y))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("image", "edge", "label"))
    writer.writerows(rows)
    atomic_write(out_dir / INDEX_FILE, buf.getvalue().encode())
    counts = {k: sum(r[2] == k for r in rows) for k in SHAPE_LABELS}
    manifest = {"n": n, "dims": list(dims), "seed": seed, "labels": list(SHAPE_LABELS), "counts": counts}
    atomic_write(out_dir / MANIFEST_FILE, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return out_dir


def load_triplet_dataset(root) -> list:
    root = Path(root)
    index = root / INDEX_FILE
    if not index.exists():
        raise InputError(f"no {INDEX_FILE} in {root}")
    out = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            x = load_gray(root / row["image"])
            e = load_edge_map(root / row["edge"])
            out.append(Triplet(x, e, row["label"]))
    if not out:
        raise InputError(f"dataset {root} is empty")
    return out
