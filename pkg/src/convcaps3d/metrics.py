"""Segmentation metrics: Dice, average surface distance, precision and recall."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# rows of the all-pairs distance matrix evaluated per block
_BLOCK = 2048


class UndefinedASD(ValueError):
    """Average surface distance requested with an empty surface on one side."""


def _masks(truth, pred, cls):
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    return truth == cls, pred == cls


def dsc(truth, pred, cls: int) -> float:
    """Dice overlap ``2|T & P| / (|T| + |P|)``; 1.0 when both masks are empty."""
    t, p = _masks(truth, pred, cls)
    denom = int(t.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((t & p).sum()) / denom


def precision_recall(truth, pred, cls: int) -> tuple[float, float]:
    t, p = _masks(truth, pred, cls)
    inter, nt, np_ = int((t & p).sum()), int(t.sum()), int(p.sum())
    both_empty = nt == 0 and np_ == 0
    precision = inter / np_ if np_ else float(both_empty)
    recall = inter / nt if nt else float(both_empty)
    return precision, recall


@dataclass
class SurfaceSet:
    voxels: np.ndarray  # [n, 3] integer coordinates
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __len__(self) -> int:
        return len(self.voxels)

    def points(self) -> np.ndarray:
        return self.voxels * np.asarray(self.spacing, dtype=np.float64)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (or off-volume)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def extract_surface(labels, cls: int, spacing=(1.0, 1.0, 1.0)) -> SurfaceSet:
    labels = np.asarray(labels)
    return SurfaceSet(np.argwhere(surface_mask(labels == cls)), tuple(spacing))


def _mean_nearest(src: np.ndarray, dst: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(src), _BLOCK):
        block = src[start : start + _BLOCK]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        total += np.sqrt(d2.min(axis=1)).sum()
    return total / len(src)


def asd_surfaces(s_truth: SurfaceSet, s_pred: SurfaceSet) -> float:
    if len(s_truth) == 0 or len(s_pred) == 0:
        raise UndefinedASD("average surface distance is undefined for an empty surface")
    pt, pp = s_truth.points(), s_pred.points()
    return 0.5 * (_mean_nearest(pp, pt) + _mean_nearest(pt, pp))


def asd(truth, pred, cls: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric mean nearest-surface distance in the units of ``spacing``."""
    _masks(truth, pred, cls)
    return asd_surfaces(extract_surface(truth, cls, spacing), extract_surface(pred, cls, spacing))


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)

    @property
    def macro(self) -> dict[str, float | None]:
        out = {}
        for key in ("dsc", "asd_mm", "precision", "recall"):
            vals = [row[key] for row in self.per_class.values() if row[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "classes": {str(c): row for c, row in sorted(self.per_class.items())},
            "macro": self.macro,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(truth, pred, classes, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    """Per-class DSC / ASD / precision / recall for the given class ids.

    ASD is ``None`` for a class whose surface is empty on either side.
    """
    report = MetricsReport()
    for cls in classes:
        p, r = precision_recall(truth, pred, cls)
        try:
            dist = asd(truth, pred, cls, spacing)
        except UndefinedASD:
            dist = None
        report.per_class[int(cls)] = {
            "dsc": dsc(truth, pred, cls), "asd_mm": dist, "precision": p, "recall": r,
        }
    return report


def merge_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Average per-class rows over several volumes (undefined ASDs skipped)."""
    merged = MetricsReport()
    classes = sorted({c for r in reports for c in r.per_class})
    for cls in classes:
        rows = [r.per_class[cls] for r in reports if cls in r.per_class]
        merged.per_class[cls] = {}
        for key in ("dsc", "asd_mm", "precision", "recall"):
            vals = [row[key] for row in rows if row[key] is not None]
            merged.per_class[cls][key] = float(np.mean(vals)) if vals else None
    return merged
