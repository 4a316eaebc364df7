"""Dice, Hausdorff distance and average perpendicular distance.

Distances are Euclidean between pixel centres, scaled by the pixel
spacing. Hausdorff is symmetric; APD is directed from the automatic contour
to the manual one. Slices with an empty contour on either side are
excluded from distance aggregates and counted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree


class EmptyContourError(ValueError):
    """A distance metric was asked about an empty contour."""


def _as_mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != bool:
        if np.any((a != 0) & (a != 1)):
            raise ValueError("mask values must be 0 or 1")
        a = a.astype(bool)
    return a


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def extract_contour(mask) -> np.ndarray:
    """Boundary pixels as an ``(K, 2)`` array of ``(row, col)``, row-major order.

    A foreground pixel is on the boundary when one of its 4-neighbours is
    background or it touches the image border.
    """
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def contour_mask(points: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    if len(points):
        out[points[:, 0], points[:, 1]] = True
    return out


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    if len(src) == 0 or len(dst) == 0:
        raise EmptyContourError("distance metrics need two non-empty contours")
    d, _ = cKDTree(dst.astype(np.float64)).query(src.astype(np.float64))
    return d


def hausdorff(a: np.ndarray, b: np.ndarray, spacing_mm: float = 1.0) -> float:
    """Symmetric Hausdorff distance between two point sets, in mm."""
    return float(max(_nearest(a, b).max(), _nearest(b, a).max()) * spacing_mm)


def apd(auto: np.ndarray, manual: np.ndarray, spacing_mm: float = 1.0) -> float:
    """Mean distance from each automatic contour point to the manual contour, in mm."""
    return float(_nearest(auto, manual).mean() * spacing_mm)


@dataclass
class SliceRecord:
    subject: str
    cycle: int
    frame: int
    dsc: float
    hd_mm: float | None
    apd_mm: float | None
    empty_prediction: bool


@dataclass
class Summary:
    mean: float
    std: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.3f} ({self.std:.3f})"


def _summary(values: list[float]) -> Summary:
    if not values:
        return Summary(float("nan"), float("nan"), 0)
    a = np.asarray(values, dtype=np.float64)
    return Summary(float(a.mean()), float(a.std()), len(a))


@dataclass
class MetricsReport:
    records: list[SliceRecord] = field(default_factory=list)

    @property
    def included(self) -> list[SliceRecord]:
        return [r for r in self.records if not r.empty_prediction]

    @property
    def excluded(self) -> int:
        return sum(r.empty_prediction for r in self.records)

    @property
    def dsc(self) -> Summary:
        return _summary([r.dsc for r in self.included])

    @property
    def hd(self) -> Summary:
        return _summary([r.hd_mm for r in self.included])

    @property
    def apd(self) -> Summary:
        return _summary([r.apd_mm for r in self.included])

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "aggregate": {k: asdict(getattr(self, k)) for k in ("dsc", "hd", "apd")},
            "excluded": self.excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([SliceRecord(**r) for r in d["records"]])

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.records + other.records)


def slice_metrics(pred, truth, spacing_mm: float = 1.0) -> tuple[float, float | None, float | None, bool]:
    """``(dsc, hd, apd, empty_prediction)`` for one slice."""
    d = dice(pred, truth)
    pc, tc = extract_contour(pred), extract_contour(truth)
    if len(pc) == 0 or len(tc) == 0:
        return d, None, None, True
    return d, hausdorff(pc, tc, spacing_mm), apd(pc, tc, spacing_mm), False


def evaluate_dataset(
    predictions: Mapping[tuple, np.ndarray],
    truths: Mapping[tuple, np.ndarray],
    spacing_mm: float | Mapping[tuple, float] = 1.0,
) -> MetricsReport:
    """Per-slice metrics for aligned ``(subject, cycle, frame)``-keyed masks.

    Either mapping may hold single masks keyed ``(subject, cycle, frame)`` or
    stacks ``(N, H, W)`` keyed ``(subject, cycle)``; records come out sorted
    by key.
    """
    missing_pred = sorted(set(truths) - set(predictions))
    missing_truth = sorted(set(predictions) - set(truths))
    if missing_pred or missing_truth:
        raise KeyError(f"unpaired slices: no prediction for {missing_pred}, no truth for {missing_truth}")
    records = []
    for key in sorted(truths):
        p, t = np.asarray(predictions[key]), np.asarray(truths[key])
        sp = spacing_mm[key] if isinstance(spacing_mm, Mapping) else spacing_mm
        if t.ndim == 3:
            if p.shape != t.shape:
                raise ValueError(f"{key}: prediction {p.shape} vs truth {t.shape}")
            items = [(key[0], key[1], f, p[f], t[f]) for f in range(t.shape[0])]
        else:
            items = [(key[0], key[1], key[2], p, t)]
        for subj, cyc, frame, pm, tm in items:
            d, h, a, empty = slice_metrics(pm, tm, sp)
            records.append(SliceRecord(str(subj), int(cyc), int(frame), d, h, a, empty))
    return MetricsReport(records)


def format_table(reports: Mapping[str, MetricsReport]) -> str:
    """Side-by-side mean (std) table, one column per model."""
    names = list(reports)
    width = max(14, *(len(n) + 2 for n in names))
    lines = ["Model".ljust(10) + "".join(n.rjust(width) for n in names)]
    for label, attr in (("DSC", "dsc"), ("HD (mm)", "hd"), ("APD (mm)", "apd")):
        lines.append(label.ljust(10) + "".join(str(getattr(reports[n], attr)).rjust(width) for n in names))
    lines.append("excluded".ljust(10) + "".join(str(reports[n].excluded).rjust(width) for n in names))
    return "\n".join(lines)
