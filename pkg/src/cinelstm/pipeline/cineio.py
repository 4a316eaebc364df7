"""``.cine`` container and overlay image export.

Layout::

    8 bytes   magic "CINE0001"
    4 bytes   little-endian uint32 header length L
    L bytes   UTF-8 JSON header
    N*H*W*4   little-endian float32 frames
    N*H*W     uint8 masks (only when the header says masks are present)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..metrics import extract_contour
from .sequence import CineSequence, CycleId

CINE_MAGIC = b"CINE0001"
_LEN = struct.Struct("<I")


def write_cine(path, seq: CineSequence) -> None:
    n, h, w = seq.frames.shape
    header = {
        "dims": [h, w],
        "frames": n,
        "cycles": 1,
        "spacing_mm": list(seq.spacing_mm),
        "ids": {"subject": seq.ids.subject, "scan": seq.ids.scan, "location": seq.ids.location, "cycle": seq.ids.cycle},
        "masks": seq.masks is not None,
    }
    text = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CINE_MAGIC)
        fh.write(_LEN.pack(len(text)))
        fh.write(text)
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
        if seq.masks is not None:
            fh.write(np.ascontiguousarray(seq.masks, dtype=np.uint8).tobytes())


def read_cine(path) -> CineSequence:
    buf = Path(path).read_bytes()
    if buf[:8] != CINE_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:8]!r}, expected {CINE_MAGIC!r}")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(buf, 8)
    start = 12 + hlen
    if start > len(buf):
        raise ValueError(f"{path}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(buf[12:start])
    except ValueError as exc:
        raise ValueError(f"{path}: unreadable header: {exc}") from None
    h, w = header["dims"]
    n = header["frames"] * header.get("cycles", 1)
    fbytes = n * h * w * 4
    mbytes = n * h * w if header["masks"] else 0
    payload = len(buf) - start
    if payload != fbytes + mbytes:
        raise ValueError(
            f"{path}: header declares {n} frames of {h}x{w} (masks={header['masks']}) = "
            f"{fbytes + mbytes} payload bytes, file holds {payload}"
        )
    frames = np.frombuffer(buf, dtype="<f4", count=n * h * w, offset=start).reshape(n, h, w).astype(np.float32)
    masks = None
    if header["masks"]:
        masks = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=start + fbytes).reshape(n, h, w).copy()
    ids = header["ids"]
    return CineSequence(
        frames=frames,
        masks=masks,
        spacing_mm=tuple(header["spacing_mm"]),
        ids=CycleId(ids["subject"], ids["scan"], ids["location"], int(ids["cycle"])),
    )


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


MANUAL_LEVEL = 255
AUTO_LEVEL = 0


def overlay_image(frame: np.ndarray, manual: np.ndarray | None, auto: np.ndarray | None) -> np.ndarray:
    """Frame scaled to 8 bits, contours burnt in: manual white, automatic black."""
    f = np.asarray(frame, dtype=np.float64)
    lo, hi = f.min(), f.max()
    gray = np.zeros(f.shape) if hi <= lo else (f - lo) / (hi - lo)
    img = (32 + gray * 191).astype(np.uint8)  # keep 0 and 255 free for contours
    for m, level in ((manual, MANUAL_LEVEL), (auto, AUTO_LEVEL)):
        if m is not None:
            pts = extract_contour(m)
            img[pts[:, 0], pts[:, 1]] = level
    return img


def export_overlays(out_dir, seq: CineSequence, auto_masks: np.ndarray | None) -> list[Path]:
    """One ``subject_cycle_frame.pgm`` per frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(seq.n_frames):
        manual = seq.masks[t] if seq.masks is not None else None
        auto = auto_masks[t] if auto_masks is not None else None
        p = out_dir / f"{seq.ids.subject}_{seq.ids.cycle:03d}_{t:02d}.pgm"
        write_pgm(p, overlay_image(seq.frames[t], manual, auto))
        paths.append(p)
    return paths
