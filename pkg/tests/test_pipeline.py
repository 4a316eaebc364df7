import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinelstm.pipeline.cineio import (
    AUTO_LEVEL,
    MANUAL_LEVEL,
    export_overlays,
    overlay_image,
    read_cine,
    read_pgm,
    write_cine,
    write_pgm,
)
from cinelstm.pipeline.phantom import (
    CohortSpec,
    PhantomSpec,
    cycle_spec,
    phantom_cohort,
    phantom_generate,
    render_frame,
)
from cinelstm.pipeline.preprocess import (
    FrameRecord,
    center_crop,
    crop_to_box,
    group_cycles,
    hough_localize,
    localize_cycle,
    motion_map,
    preprocess_series,
    resample_to_unit_mm,
)
from cinelstm.pipeline.sequence import CineSequence, CycleId
from oracles import disk, ring


class TestResample:
    def test_identity(self, rng):
        img = rng.random((20, 30)).astype(np.float32)
        out = resample_to_unit_mm(img, (1.0, 1.0))
        assert out.dtype == img.dtype and np.array_equal(out, img) and out is not img

    def test_upsample_shape(self, rng):
        assert resample_to_unit_mm(rng.random((100, 100)), 2.0).shape == (200, 200)
        assert resample_to_unit_mm(rng.random((100, 80)), (0.5, 1.25)).shape == (50, 100)

    def test_constant_preserved(self):
        out = resample_to_unit_mm(np.full((37, 41), 3.25), (1.37, 0.71))
        np.testing.assert_allclose(out, 3.25, rtol=0, atol=1e-12)

    def test_linear_ramp_exact_inside(self):
        # bilinear interpolation reproduces linear functions away from the clamped border
        img = np.add.outer(np.arange(20.0), 2 * np.arange(20.0))
        out = resample_to_unit_mm(img, 2.0)
        r = np.arange(40)
        src = (r + 0.5) / 2 - 0.5
        inner = slice(2, 38)
        np.testing.assert_allclose(out[inner, inner], np.add.outer(src[inner], 2 * src[inner]), atol=1e-9)

    def test_bad_spacing(self):
        with pytest.raises(ValueError, match="positive"):
            resample_to_unit_mm(np.zeros((4, 4)), (0.0, 1.0))


class TestCrop:
    def test_larger(self, rng):
        img = rng.random((200, 200))
        assert np.array_equal(center_crop(img), img[8:192, 8:192])

    def test_identity(self, rng):
        img = rng.random((184, 184))
        assert np.array_equal(center_crop(img), img)

    def test_pad(self, rng):
        img = rng.random((100, 100)) + 1
        out = center_crop(img)
        assert out.shape == (184, 184)
        assert np.array_equal(out[42:142, 42:142], img)
        assert out.sum() == pytest.approx(img.sum())

    def test_stack(self, rng):
        assert center_crop(rng.random((3, 50, 40)), 32).shape == (3, 32, 32)


class TestMotionMap:
    def test_static(self, rng):
        frames = np.repeat(rng.random((1, 8, 8)), 5, axis=0)
        assert np.all(motion_map(frames) == 0)

    def test_single_moving_pixel(self):
        frames = np.zeros((25, 6, 6))
        frames[::2, 3, 4] = 1.0
        m = motion_map(frames)
        assert np.unravel_index(np.argmax(m), m.shape) == (3, 4)
        assert np.count_nonzero(m) == 1

    def test_scalar_oracle(self, rng):
        frames = rng.random((25, 5, 4))
        m = motion_map(CineSequence(frames))
        for r in range(5):
            for c in range(4):
                v = [float(x) for x in frames[:, r, c].astype(np.float32)]
                mean = sum(v) / len(v)
                sd = (sum((x - mean) ** 2 for x in v) / len(v)) ** 0.5
                assert abs(m[r, c] - sd) < 1e-10

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError, match="2 frames"):
            motion_map(np.zeros((1, 4, 4)))


class TestHough:
    def test_ring(self):
        loc = hough_localize(ring(184, 92, 92, 20), 5, 60)
        assert abs(loc.center[0] - 92) <= 2 and abs(loc.center[1] - 92) <= 2
        assert abs(loc.radius - 20) <= 2
        r = loc.radius + 16
        assert loc.box == (loc.center[0] - r, loc.center[1] - r, loc.center[0] + r, loc.center[1] + r)

    def test_box_clamped(self):
        loc = hough_localize(disk(64, 14, 50, 10), 4, 20)
        assert loc.box[0] == 0 and loc.box[3] == 64

    def test_larger_circle_wins(self):
        img = ring(184, 60, 60, 20) + ring(184, 130, 130, 8)
        loc = hough_localize(img, 5, 40)
        assert abs(loc.center[0] - 60) <= 2 and abs(loc.radius - 20) <= 2

    def test_tie_break_smallest_row_col(self):
        img = disk(184, 120, 50, 15) + disk(184, 50, 130, 15)
        loc = hough_localize(img, 5, 30)
        assert abs(loc.center[0] - 50) <= 2 and abs(loc.center[1] - 130) <= 2

    def test_blank(self):
        with pytest.raises(ValueError, match="no edge"):
            hough_localize(np.zeros((64, 64)), 4, 20)

    def test_bad_radius_range(self):
        with pytest.raises(ValueError, match="radius range"):
            hough_localize(np.zeros((64, 64)), 10, 40)

    def test_random_circles(self, rng):
        for _ in range(10):
            r = int(rng.integers(8, 41))
            cy, cx = rng.uniform(r + 3, 184 - r - 3, 2)
            loc = hough_localize(disk(184, cy, cx, r), 6, 45)
            assert np.hypot(loc.center[0] - cy, loc.center[1] - cx) <= 2
            assert abs(loc.radius - r) <= 2

    def test_crop_to_box(self, rng):
        seq = CineSequence(rng.random((3, 64, 64)), (rng.random((3, 64, 64)) > 0.5).astype(np.uint8))
        out = crop_to_box(seq, (10, 30, 40, 60), 24)
        assert out.frames.shape == (3, 24, 24) and out.masks.shape == (3, 24, 24)
        assert np.array_equal(out.frames, seq.frames[:, 13:37, 33:57])
        edge = crop_to_box(seq, (0, 50, 10, 64), 24)
        assert np.array_equal(edge.frames, seq.frames[:, 0:24, 40:64])

    def test_phantom_motion_localization(self):
        seq = phantom_generate(PhantomSpec(size=96, inner_radius=15, outer_radius=24, beat_amplitude=4, noise=0.0), 1)[0]
        loc = localize_cycle(seq, 5, 40)
        assert abs(loc.center[0] - 47.5) <= 3 and abs(loc.center[1] - 47.5) <= 3


def records(n, subject="a", location="l0", shuffle=None):
    order = list(range(n)) if shuffle is None else list(shuffle.permutation(n))
    return [FrameRecord(subject, "scan", location, t, np.full((4, 4), t, np.float32)) for t in order]


class TestGroupCycles:
    def test_450_frames(self):
        cycles = group_cycles(records(450))
        assert len(cycles) == 18 and all(c.n_frames == 25 for c in cycles)
        assert [c.ids.cycle for c in cycles] == list(range(18))

    def test_order_restored(self, rng):
        (c,) = group_cycles(records(25, shuffle=rng))
        assert list(c.frames[:, 0, 0]) == list(range(25))

    def test_bad_count_names_group(self):
        with pytest.raises(ValueError, match="subject=b.*location=l1.*26"):
            group_cycles(records(25) + records(26, "b", "l1"))

    def test_separate_locations(self):
        cycles = group_cycles(records(50, location="l0") + records(25, location="l1"))
        assert [c.ids.location for c in cycles] == ["l0", "l0", "l1"]

    def test_preprocess_chain_deterministic(self, rng):
        recs = [
            FrameRecord("a", "s", "l", t, rng.random((90, 100)), (rng.random((90, 100)) > 0.5).astype(np.uint8), (1.25, 1.25))
            for t in range(25)
        ]
        a, b = preprocess_series(recs), preprocess_series(recs)
        assert a[0].frames.shape == (25, 184, 184) and a[0].masks.shape == (25, 184, 184)
        assert np.array_equal(a[0].frames, b[0].frames) and np.array_equal(a[0].masks, b[0].masks)


class TestPhantom:
    def test_mask_area(self):
        spec = PhantomSpec(size=48, inner_radius=10, outer_radius=16, noise=0.0, beat_amplitude=0.0)
        _, mask = render_frame(spec, 0)
        assert abs(mask.sum() - np.pi * (16**2 - 10**2)) <= 0.05 * np.pi * (16**2 - 10**2)

    def test_zero_thinning_is_noop(self):
        base = PhantomSpec(noise=0.0)
        thin = PhantomSpec(noise=0.0, thinning_sector=(30, 150), thinning_factor=0.0)
        for t in range(0, 25, 6):
            assert np.array_equal(render_frame(base, t)[1], render_frame(thin, t)[1])

    def test_thinning_removes_pixels_in_sector_only(self):
        base = PhantomSpec(noise=0.0)
        thin = PhantomSpec(noise=0.0, thinning_sector=(0, 90), thinning_factor=0.5)
        a, b = render_frame(base, 0)[1], render_frame(thin, 0)[1]
        assert np.all(b <= a) and b.sum() < a.sum()
        # the upper-right quadrant holds angles 0..90 (rows grow downward)
        diff = a.astype(int) - b
        rows, cols = np.nonzero(diff)
        assert np.all(rows <= 24) and np.all(cols >= 23)

    def test_deterministic(self):
        spec = PhantomSpec(seed=7, jitter=1.0)
        a, b = phantom_generate(spec, 2), phantom_generate(spec, 2)
        for x, y in zip(a, b):
            assert np.array_equal(x.frames, y.frames) and np.array_equal(x.masks, y.masks)
        assert not np.array_equal(a[0].frames, a[1].frames)

    def test_masks_match_noise_free_intensity(self):
        spec = PhantomSpec(lesion_sector=(200, 300), lesion_attenuation=0.7, lesion_frames=(5, 10))
        for t in (0, 7):
            img, mask = render_frame(spec, t)
            vals = np.unique(img[mask == 1])
            allowed = {spec.myocardium, spec.myocardium * (1 - spec.lesion_attenuation)}
            assert all(any(abs(v - a) < 1e-12 for a in allowed) for v in vals)
            assert np.all(img[mask == 0] != spec.myocardium)
        assert len(np.unique(render_frame(spec, 7)[0][render_frame(spec, 7)[1] == 1])) == 2

    def test_beat_changes_area(self):
        spec = PhantomSpec(noise=0.0)
        areas = [render_frame(spec, t)[1].sum() for t in range(25)]
        assert areas[12] != areas[0]

    @pytest.mark.parametrize(
        "kw",
        [
            {"inner_radius": 2.0, "beat_amplitude": 3.0},
            {"inner_radius": 12.0, "outer_radius": 10.0},
            {"outer_radius": 30.0},
            {"thinning_factor": 1.5},
            {"lesion_frames": (20, 30)},
        ],
    )
    def test_invalid_specs(self, kw):
        with pytest.raises(ValueError):
            phantom_generate(PhantomSpec(**kw), 1)

    def test_spec_dict_round_trip(self):
        spec = PhantomSpec(lesion_sector=(10, 80), lesion_frames=(3, 8), lesion_attenuation=0.5)
        assert PhantomSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError, match="unknown"):
            PhantomSpec.from_dict({"radius": 3})

    def test_cohort(self):
        cohort = CohortSpec(seed=3)
        data = phantom_cohort(cohort, 2, 3)
        assert list(data) == ["subject00", "subject01"]
        assert [s.ids.cycle for s in data["subject01"]] == [0, 1, 2]
        forced = cycle_spec(cohort, 0, 0, force_lesion=True)
        assert forced.lesion_frames[1] - forced.lesion_frames[0] == cohort.lesion_length
        assert CohortSpec.from_dict(cohort.to_dict()) == cohort

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 5), st.booleans())
    def test_cohort_specs_always_valid(self, seed, subject, force):
        cycle_spec(CohortSpec(seed=seed), subject, 0, force).validate()


class TestCineIO:
    def seq(self, rng, masks=True):
        return CineSequence(
            rng.random((25, 12, 10)).astype(np.float32),
            (rng.random((25, 12, 10)) > 0.5).astype(np.uint8) if masks else None,
            (1.0, 0.75),
            CycleId("pig3", "scanB", "loc2", 4),
        )

    def test_round_trip(self, tmp_path, rng):
        s = self.seq(rng)
        write_cine(tmp_path / "a.cine", s)
        back = read_cine(tmp_path / "a.cine")
        assert np.array_equal(back.frames, s.frames) and np.array_equal(back.masks, s.masks)
        assert back.spacing_mm == s.spacing_mm and back.ids == s.ids

    def test_masks_absent(self, tmp_path, rng):
        write_cine(tmp_path / "a.cine", self.seq(rng, masks=False))
        assert read_cine(tmp_path / "a.cine").masks is None

    def test_short_payload(self, tmp_path, rng):
        path = tmp_path / "a.cine"
        write_cine(path, self.seq(rng, masks=False))
        buf = path.read_bytes()
        path.write_bytes(buf[: len(buf) - 12 * 10 * 4])
        with pytest.raises(ValueError, match="25 frames"):
            read_cine(path)

    @pytest.mark.parametrize("cut", [4, 10, 20])
    def test_truncated_header(self, tmp_path, rng, cut):
        path = tmp_path / "a.cine"
        write_cine(path, self.seq(rng))
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(ValueError):
            read_cine(path)

    def test_bad_magic(self, tmp_path, rng):
        path = tmp_path / "a.cine"
        write_cine(path, self.seq(rng))
        path.write_bytes(b"CINE0002" + path.read_bytes()[8:])
        with pytest.raises(ValueError, match="CINE0001"):
            read_cine(path)

    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 9)).astype(np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_overlay_levels(self, rng):
        manual = np.zeros((16, 16), np.uint8)
        manual[4:12, 4:12] = 1
        auto = np.zeros((16, 16), np.uint8)
        auto[6:10, 6:10] = 1
        img = overlay_image(rng.random((16, 16)), manual, auto)
        assert np.count_nonzero(img == MANUAL_LEVEL) == 28
        assert np.count_nonzero(img == AUTO_LEVEL) == 12
        assert img[0, 0] not in (MANUAL_LEVEL, AUTO_LEVEL)

    def test_export_names(self, tmp_path, rng):
        s = self.seq(rng)
        paths = export_overlays(tmp_path / "ov", s, s.masks)
        assert len(paths) == 25 and paths[3].name == "pig3_004_03.pgm"
