"""Resampling, cropping, LV localization and cycle grouping."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np
from scipy import ndimage, signal

from .sequence import FRAMES_PER_CYCLE, CineSequence, CycleId

CROP_SIZE = 184
BOX_MARGIN = 16


def resample_to_unit_mm(image: np.ndarray, spacing_mm) -> np.ndarray:
    """Bilinear resampling to 1 mm isotropic pixels.

    Output extent is ``round(dim * spacing)`` per axis; pixel centres are
    aligned, and samples beyond the edge repeat the border value.
    """
    sr, sc = (spacing_mm, spacing_mm) if np.isscalar(spacing_mm) else spacing_mm
    if sr <= 0 or sc <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing_mm}")
    image = np.asarray(image)
    if sr == 1.0 and sc == 1.0:
        return image.copy()
    h, w = image.shape
    ho, wo = int(round(h * sr)), int(round(w * sc))
    rows = (np.arange(ho) + 0.5) / sr - 0.5
    cols = (np.arange(wo) + 0.5) / sc - 0.5
    rr, cc = np.meshgrid(np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), indexing="ij")
    out = ndimage.map_coordinates(image.astype(np.float64), [rr, cc], order=1, mode="nearest")
    return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)


def _span(n: int, size: int) -> tuple[int, int, int]:
    # (source start, destination start, length) along one axis
    if n >= size:
        return (n - size) // 2, 0, size
    return 0, (size - n) // 2, n


def center_crop(image: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    """Central ``size`` x ``size`` window, zero-padding symmetrically when smaller."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    sr, dr, nr = _span(h, size)
    sc, dc, nc = _span(w, size)
    out = np.zeros(image.shape[:-2] + (size, size), dtype=image.dtype)
    out[..., dr : dr + nr, dc : dc + nc] = image[..., sr : sr + nr, sc : sc + nc]
    return out


def motion_map(cycle) -> np.ndarray:
    """Per-pixel temporal standard deviation (population) over the frames."""
    frames = cycle.frames if isinstance(cycle, CineSequence) else np.asarray(cycle)
    if frames.shape[0] < 2:
        raise ValueError("motion analysis needs at least 2 frames")
    f = frames.astype(np.float64)
    # shifting by the first frame is exact for static pixels, where the plain mean can round
    return (f - f[0]).std(axis=0)


class Localization(NamedTuple):
    center: tuple[int, int]  # (row, col)
    radius: int
    box: tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open


def _ring_kernel(r: int) -> np.ndarray:
    n = max(16, int(np.ceil(8 * np.pi * r)))
    theta = np.arange(n) * (2 * np.pi / n)
    dy = np.round(r * np.sin(theta)).astype(int)
    dx = np.round(r * np.cos(theta)).astype(int)
    k = np.zeros((2 * r + 1, 2 * r + 1))
    k[dy + r, dx + r] = 1.0
    return k


def edge_map(image: np.ndarray, percentile: float = 90.0) -> np.ndarray:
    """Sobel magnitude strictly above its ``percentile``-th percentile."""
    img = np.asarray(image, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(img, axis=0), ndimage.sobel(img, axis=1))
    return mag > np.percentile(mag, percentile)


def hough_accumulator(edges: np.ndarray, r_min: int, r_max: int) -> np.ndarray:
    """Vote counts indexed ``[row, col, radius - r_min]``."""
    h, w = edges.shape
    e = edges.astype(np.float64)
    acc = np.empty((h, w, r_max - r_min + 1), dtype=np.int64)
    for k, r in enumerate(range(r_min, r_max + 1)):
        # ring kernel is point symmetric, so convolution equals correlation
        votes = signal.fftconvolve(e, _ring_kernel(r), mode="same")
        acc[:, :, k] = np.rint(votes).astype(np.int64)
    return acc


def hough_localize(
    image: np.ndarray,
    r_min: int,
    r_max: int,
    margin: int = BOX_MARGIN,
    percentile: float = 90.0,
) -> Localization:
    """Strongest circle in ``image`` and a square box around it.

    Ties go to the smallest ``(row, col, radius)``.
    """
    img = np.asarray(image)
    h, w = img.shape
    if not (0 < r_min < r_max < min(h, w) / 2):
        raise ValueError(f"radius range [{r_min}, {r_max}] invalid for a {h}x{w} map")
    edges = edge_map(img, percentile)
    if not edges.any():
        raise ValueError("no edge pixels above threshold; cannot localize")
    acc = hough_accumulator(edges, r_min, r_max)
    cy, cx, kr = np.unravel_index(int(np.argmax(acc)), acc.shape)
    r = r_min + int(kr)
    half = r + margin
    box = (max(0, cy - half), max(0, cx - half), min(h, cy + half), min(w, cx + half))
    return Localization((int(cy), int(cx)), r, tuple(int(b) for b in box))


@dataclass
class FrameRecord:
    subject: str
    scan: str
    location: str
    time_index: int
    image: np.ndarray
    mask: np.ndarray | None = None
    spacing_mm: tuple[float, float] = (1.0, 1.0)


def group_cycles(slices: Iterable[FrameRecord], n_frames: int = FRAMES_PER_CYCLE) -> list[CineSequence]:
    """Split each (subject, scan, location) series into cycles of ``n_frames``."""
    groups: OrderedDict[tuple, list[FrameRecord]] = OrderedDict()
    for rec in slices:
        groups.setdefault((rec.subject, rec.scan, rec.location), []).append(rec)
    out = []
    for key, recs in groups.items():
        if len(recs) % n_frames:
            raise ValueError(
                f"series subject={key[0]} scan={key[1]} location={key[2]} has {len(recs)} frames, "
                f"not a multiple of {n_frames}"
            )
        recs = sorted(recs, key=lambda r: r.time_index)
        has_masks = all(r.mask is not None for r in recs)
        for c in range(len(recs) // n_frames):
            chunk = recs[c * n_frames : (c + 1) * n_frames]
            out.append(
                CineSequence(
                    frames=np.stack([r.image for r in chunk]),
                    masks=np.stack([r.mask for r in chunk]) if has_masks else None,
                    spacing_mm=chunk[0].spacing_mm,
                    ids=CycleId(*key, c),
                )
            )
    return out


def preprocess_series(slices: Iterable[FrameRecord], size: int = CROP_SIZE, n_frames: int = FRAMES_PER_CYCLE):
    """Resample and crop every frame, then group into cycles."""
    prepared = []
    for rec in slices:
        img = center_crop(resample_to_unit_mm(rec.image, rec.spacing_mm), size)
        mask = None
        if rec.mask is not None:
            m = resample_to_unit_mm(rec.mask.astype(np.float32), rec.spacing_mm)
            mask = (center_crop(m, size) >= 0.5).astype(np.uint8)
        prepared.append(FrameRecord(rec.subject, rec.scan, rec.location, rec.time_index, img, mask, (1.0, 1.0)))
    return group_cycles(prepared, n_frames)


def localize_cycle(cycle: CineSequence, r_min: int, r_max: int, margin: int = BOX_MARGIN) -> Localization:
    """Motion map followed by circle detection."""
    return hough_localize(motion_map(cycle), r_min, r_max, margin)


def crop_to_box(cycle: CineSequence, box, size: int) -> CineSequence:
    """Tighter-crop mode: ``size`` x ``size`` window centred on the box."""
    r0, c0, r1, c1 = box
    cy, cx = (r0 + r1) // 2, (c0 + c1) // 2
    h, w = cycle.shape
    top = int(np.clip(cy - size // 2, 0, max(0, h - size)))
    left = int(np.clip(cx - size // 2, 0, max(0, w - size)))
    sl = (slice(None), slice(top, top + size), slice(left, left + size))
    masks = cycle.masks[sl] if cycle.masks is not None else None
    return CineSequence(cycle.frames[sl], masks, cycle.spacing_mm, cycle.ids)
