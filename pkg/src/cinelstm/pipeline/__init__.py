from .cineio import export_overlays, read_cine, write_cine
from .phantom import CohortSpec, PhantomSpec, phantom_cohort, phantom_generate
from .preprocess import (
    FrameRecord,
    Localization,
    center_crop,
    group_cycles,
    hough_localize,
    localize_cycle,
    motion_map,
    resample_to_unit_mm,
)
from .sequence import FRAMES_PER_CYCLE, CineSequence, CycleId

__all__ = [
    "CineSequence",
    "CohortSpec",
    "CycleId",
    "FRAMES_PER_CYCLE",
    "FrameRecord",
    "Localization",
    "PhantomSpec",
    "center_crop",
    "export_overlays",
    "group_cycles",
    "hough_localize",
    "localize_cycle",
    "motion_map",
    "phantom_cohort",
    "phantom_generate",
    "read_cine",
    "resample_to_unit_mm",
    "write_cine",
]
