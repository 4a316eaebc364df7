"""Synthetic short-axis cine phantoms with exact myocardium masks.

Each frame is a bright annulus (myocardium) around a brighter disk (blood
pool) on a dark background. Radii follow a sinusoidal beat, the centre
drifts slightly, and two infarction-like effects can be switched on: a
thinned wall sector and a sector whose intensity drops over a frame range.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ..seeding import substream
from .sequence import FRAMES_PER_CYCLE, CineSequence, CycleId


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 48
    frames: int = FRAMES_PER_CYCLE
    center_drift: float = 1.0
    inner_radius: float = 7.0
    outer_radius: float = 12.0
    beat_amplitude: float = 2.0
    thinning_sector: tuple[float, float] | None = None  # degrees, counter-clockwise start -> end
    thinning_factor: float = 0.0
    lesion_sector: tuple[float, float] | None = None
    lesion_attenuation: float = 0.0
    lesion_frames: tuple[int, int] | None = None  # half-open frame range
    noise: float = 0.03
    jitter: float = 0.0
    background: float = 0.05
    myocardium: float = 0.60
    blood_pool: float = 0.95
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("thinning_sector", "lesion_sector", "lesion_frames"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("phantom needs at least one frame")
        lo_inner = self.inner_radius - self.beat_amplitude - self.jitter
        if lo_inner <= 0:
            raise ValueError(f"inner radius reaches {lo_inner:.2f} px at systole; must stay > 0")
        if not self.inner_radius < self.outer_radius:
            raise ValueError("inner radius must be smaller than outer radius")
        reach = self.outer_radius + self.center_drift + 2 * self.jitter
        if reach >= self.size / 2:
            raise ValueError(f"annulus reaches {reach:.2f} px from centre; image half-size is {self.size / 2}")
        for name in ("thinning_factor", "lesion_attenuation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.beat_amplitude < 0 or self.noise < 0 or self.center_drift < 0 or self.jitter < 0:
            raise ValueError("amplitudes, drift, jitter and noise must be non-negative")
        if self.lesion_frames is not None:
            a, b = self.lesion_frames
            if not 0 <= a <= b <= self.frames:
                raise ValueError(f"lesion frame range {self.lesion_frames} outside 0..{self.frames}")


def _in_sector(angle_deg: np.ndarray, sector) -> np.ndarray:
    start, end = (s % 360.0 for s in sector)
    if start <= end:
        return (angle_deg >= start) & (angle_deg <= end)
    return (angle_deg >= start) | (angle_deg <= end)


def frame_geometry(spec: PhantomSpec, t: int, offset=(0.0, 0.0), radius_shift: float = 0.0):
    """Centre ``(row, col)`` and ``(inner, outer)`` radii at frame ``t``."""
    phase = 2 * np.pi * t / spec.frames
    contraction = 0.5 * (1 - np.cos(phase))
    c0 = (spec.size - 1) / 2.0
    cy = c0 + offset[0] + spec.center_drift * np.sin(phase)
    cx = c0 + offset[1] + spec.center_drift * (np.cos(phase) - 1.0) / 2
    inner = spec.inner_radius + radius_shift - spec.beat_amplitude * contraction
    outer = spec.outer_radius + radius_shift - 0.5 * spec.beat_amplitude * contraction
    return (cy, cx), (inner, outer)


def render_frame(spec: PhantomSpec, t: int, offset=(0.0, 0.0), radius_shift: float = 0.0):
    """Noise-free image and exact mask for one frame."""
    (cy, cx), (inner, outer) = frame_geometry(spec, t, offset, radius_shift)
    rr, cc = np.mgrid[: spec.size, : spec.size].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    dist = np.hypot(dy, dx)
    # image rows grow downward, so flip dy for a counter-clockwise angle
    angle = np.degrees(np.arctan2(-dy, dx)) % 360.0
    outer_eff = np.full_like(dist, outer)
    if spec.thinning_sector is not None and spec.thinning_factor > 0:
        thin = _in_sector(angle, spec.thinning_sector)
        outer_eff[thin] = inner + (outer - inner) * (1.0 - spec.thinning_factor)
    mask = (dist >= inner) & (dist < outer_eff)
    image = np.full(dist.shape, spec.background)
    image[dist < inner] = spec.blood_pool
    myo = np.full(dist.shape, spec.myocardium)
    if (
        spec.lesion_sector is not None
        and spec.lesion_frames is not None
        and spec.lesion_frames[0] <= t < spec.lesion_frames[1]
    ):
        myo[_in_sector(angle, spec.lesion_sector)] *= 1.0 - spec.lesion_attenuation
    image[mask] = myo[mask]
    return image, mask.astype(np.uint8)


def phantom_generate(spec: PhantomSpec, cycles: int, subject: str = "s0", scan: str = "phantom") -> list[CineSequence]:
    """``cycles`` cine sequences with masks; deterministic in ``spec.seed``."""
    spec.validate()
    out = []
    for k in range(cycles):
        rng = substream(spec.seed, "cycle", k)
        offset = rng.uniform(-spec.jitter, spec.jitter, 2) if spec.jitter else np.zeros(2)
        shift = float(rng.uniform(-0.5, 0.5) * spec.jitter) if spec.jitter else 0.0
        frames, masks = [], []
        for t in range(spec.frames):
            img, m = render_frame(spec, t, offset, shift)
            if spec.noise:
                img = img + rng.normal(0.0, spec.noise, img.shape)
            frames.append(img)
            masks.append(m)
        out.append(
            CineSequence(
                frames=np.stack(frames).astype(np.float32),
                masks=np.stack(masks),
                spacing_mm=(1.0, 1.0),
                ids=CycleId(subject, scan, "loc0", k),
            )
        )
    return out


@dataclass(frozen=True)
class CohortSpec:
    """Randomization of per-cycle infarction effects across a synthetic cohort."""

    base: PhantomSpec = PhantomSpec(jitter=1.5)
    lesion_probability: float = 0.5
    lesion_length: int = 5
    lesion_attenuation: tuple[float, float] = (0.6, 0.9)
    thinning_probability: float = 0.5
    thinning_factor: tuple[float, float] = (0.3, 0.6)
    sector_width: tuple[float, float] = (60.0, 120.0)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cohort keys: {sorted(unknown)}")
        d = dict(d)
        if "base" in d:
            d["base"] = PhantomSpec.from_dict(d["base"])
        for key in ("lesion_attenuation", "thinning_factor", "sector_width"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("lesion_probability", "thinning_probability"):
            if key in d and not 0.0 <= d[key] <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1]")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        return d


def subject_name(index: int) -> str:
    return f"subject{index:02d}"


def cycle_spec(cohort: CohortSpec, subject: int, cycle: int, force_lesion: bool = False) -> PhantomSpec:
    """Spec for one cycle of one synthetic subject."""
    rng = substream(cohort.seed, "subject", subject, "cycle", cycle)
    base = cohort.base
    changes = {"seed": int(rng.integers(0, 2**31 - 1))}
    # subject-level anatomy: fixed per subject, independent of cycle
    srng = substream(cohort.seed, "subject", subject, "anatomy")
    scale = srng.uniform(0.9, 1.1)
    changes["inner_radius"] = base.inner_radius * scale
    changes["outer_radius"] = base.inner_radius * scale + (base.outer_radius - base.inner_radius) * srng.uniform(0.9, 1.1)
    if rng.random() < cohort.thinning_probability:
        start = rng.uniform(0, 360)
        changes["thinning_sector"] = (start, start + rng.uniform(*cohort.sector_width))
        changes["thinning_factor"] = rng.uniform(*cohort.thinning_factor)
    lesion = force_lesion or rng.random() < cohort.lesion_probability
    if lesion:
        start = rng.uniform(0, 360)
        first = int(rng.integers(0, base.frames - cohort.lesion_length + 1))
        changes["lesion_sector"] = (start, start + rng.uniform(*cohort.sector_width))
        changes["lesion_attenuation"] = rng.uniform(*cohort.lesion_attenuation)
        changes["lesion_frames"] = (first, first + cohort.lesion_length)
    spec = replace(base, **changes)
    spec.validate()
    return spec


def phantom_cohort(
    cohort: CohortSpec,
    subjects: int,
    cycles_per_subject: int,
    force_lesion: bool = False,
) -> dict[str, list[CineSequence]]:
    """Subject name -> list of cycles; every cycle is its own phantom draw."""
    data: dict[str, list[CineSequence]] = {}
    for s in range(subjects):
        name = subject_name(s)
        seqs = []
        for c in range(cycles_per_subject):
            spec = cycle_spec(cohort, s, c, force_lesion)
            seq = phantom_generate(spec, 1, subject=name)[0]
            seq.ids = CycleId(name, "phantom", "loc0", c)
            seqs.append(seq)
        data[name] = seqs
    return data
