"""Edge-fidelity recall: eroded reference sketch vs edges of a generated image,
both cropped to the sketch's bounding box."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import SketchImage, atomic_write, binarize, extract_edges
from .errors import InputError

SQUARE_3X3 = np.ones((3, 3), dtype=bool)


def _as_mask(sketch) -> np.ndarray:
    arr = sketch.data if isinstance(sketch, SketchImage) else np.asarray(sketch)
    return arr.astype(bool)


def erode(sketch, se: np.ndarray = SQUARE_3X3) -> np.ndarray:
    """Binary erosion; pixels outside the frame count as 0."""
    return ndimage.binary_erosion(_as_mask(sketch), structure=np.asarray(se, dtype=bool),
                                  border_value=0).astype(np.uint8)


def contour_bbox(sketch) -> tuple:
    """Inclusive (row_min, col_min, row_max, col_max) of the nonzero support."""
    mask = _as_mask(sketch)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise InputError("cannot take the bounding box of an empty sketch")
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def crop(arr: np.ndarray, bbox) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    return arr[r0:r1 + 1, c0:c1 + 1]


@dataclass
class ImageRecall:
    id: str
    recall: float | None
    tp: int
    fn: int
    fp: int
    bbox: tuple
    excluded: bool
    # not part of the recall protocol; kept as labelled extras
    precision: float | None = None
    f1: float | None = None


def recall_from_masks(predicted: np.ndarray, sketch, image_id: str = "", erode_reference: bool = True,
                      se: np.ndarray = SQUARE_3X3) -> ImageRecall:
    pred = np.asarray(predicted).astype(bool)
    ref_full = _as_mask(sketch)
    if pred.shape != ref_full.shape:
        raise InputError(f"edge map shape {pred.shape} != sketch shape {ref_full.shape}")
    bbox = contour_bbox(ref_full)
    ref = erode(ref_full, se).astype(bool) if erode_reference else ref_full
    ref_c, pred_c = crop(ref, bbox), crop(pred, bbox)
    tp = int(np.count_nonzero(ref_c & pred_c))
    fn = int(np.count_nonzero(ref_c & ~pred_c))
    fp = int(np.count_nonzero(~ref_c & pred_c))
    if tp + fn == 0:
        return ImageRecall(image_id, None, tp, fn, fp, bbox, True)
    rec = tp / (tp + fn)
    prec = tp / (tp + fp) if tp + fp else None
    f1 = 2 * prec * rec / (prec + rec) if prec and rec else (0.0 if prec is not None else None)
    return ImageRecall(image_id, rec, tp, fn, fp, bbox, False, prec, f1)


def recall(generated_image, sketch, extractor="sobel", threshold: float = 0.5, image_id: str = "",
           erode_reference: bool = True) -> ImageRecall:
    """Extract and binarize edges of ``generated_image`` then score them against ``sketch``."""
    edges = binarize(extract_edges(generated_image, extractor), threshold).data
    return recall_from_masks(edges, sketch, image_id, erode_reference)


@dataclass
class RecallReport:
    records: list = field(default_factory=list)

    @property
    def included(self) -> list:
        return [r for r in self.records if not r.excluded]

    @property
    def mean_recall(self) -> float | None:
        vals = [r.recall for r in self.included]
        return float(np.mean(vals)) if vals else None

    @property
    def exclusions(self) -> int:
        return sum(r.excluded for r in self.records)

    def summary(self) -> dict:
        prec = [r.precision for r in self.included if r.precision is not None]
        return {
            "mean_recall": self.mean_recall,
            "count": len(self.included),
            "exclusions": self.exclusions,
            "extra_mean_precision_non_protocol": float(np.mean(prec)) if prec else None,
        }

    def write(self, path) -> Path:
        lines = []
        for r in self.records:
            row = asdict(r)
            row["bbox"] = list(r.bbox)
            lines.append(json.dumps({"kind": "image", **row}, sort_keys=True))
        lines.append(json.dumps({"kind": "summary", **self.summary()}, sort_keys=True))
        atomic_write(path, ("\n".join(lines) + "\n").encode())
        return Path(path)


def read_report(path) -> tuple:
    rows, summary = [], None
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.pop("kind") == "summary":
            summary = rec
        else:
            rows.append(rec)
    return rows, summary


def evaluate_corpus(pairs, extractor="sobel", threshold: float = 0.5, erode_reference: bool = True) -> RecallReport:
    """``pairs`` yields (id, generated image, sketch) triples."""
    report = RecallReport()
    for image_id, image, sketch in pairs:
        report.records.append(recall(image, sketch, extractor, threshold, image_id, erode_reference))
    return report
