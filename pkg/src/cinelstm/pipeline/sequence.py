from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

FRAMES_PER_CYCLE = 25


class CycleId(NamedTuple):
    subject: str
    scan: str
    location: str
    cycle: int

    @property
    def tag(self) -> str:
        return f"{self.subject}_{self.scan}_{self.location}_c{self.cycle:03d}"


@dataclass
class CineSequence:
    """One cardiac cycle at one slice location.

    ``frames`` is ``(N, H, W)`` float32 in temporal order, ``masks`` the
    aligned binary myocardium masks (uint8) or ``None``.
    """

    frames: np.ndarray
    masks: np.ndarray | None = None
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    ids: CycleId = field(default_factory=lambda: CycleId("s0", "scan0", "loc0", 0))

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (N, H, W), got {self.frames.shape}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
            if self.masks.shape != self.frames.shape:
                raise ValueError(f"masks {self.masks.shape} not aligned with frames {self.frames.shape}")
            if self.masks.max(initial=0) > 1:
                raise ValueError("masks must be binary")
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if not isinstance(self.ids, CycleId):
            self.ids = CycleId(*self.ids)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def with_frames(self, frames: np.ndarray) -> "CineSequence":
        return replace(self, frames=frames)
