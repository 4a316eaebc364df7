import numpy as np
import pytest

from cinelstm.encoder import (
    EncoderConfig,
    EncoderParams,
    ResUnitParams,
    encoder_forward,
    init_encoder,
    init_res_unit,
    res_unit_forward,
    weighted_layer_count,
)
from cinelstm.gradcheck import check_gradients
from cinelstm.tensorcore import ShapeError, Tensor


def as64(p: ResUnitParams) -> ResUnitParams:
    return ResUnitParams(
        *(Tensor(t.data.astype(np.float64)) for t in (p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b)),
        projection=None if p.projection is None else Tensor(p.projection.data.astype(np.float64)),
    )


class TestResUnit:
    def test_zero_branch_is_relu(self, rng):
        p = init_res_unit(4, 4, 1, rng)
        for t in (p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b):
            t.data[:] = 0
        x = rng.standard_normal((4, 6, 6)).astype(np.float32)
        out = res_unit_forward(p, Tensor(x), 1)
        assert np.array_equal(out.data, np.maximum(x, 0))

    def test_identity_shortcut_has_no_projection(self, rng):
        assert init_res_unit(4, 4, 1, rng).projection is None
        assert init_res_unit(4, 8, 1, rng).projection is not None
        assert init_res_unit(4, 4, 2, rng).projection is not None

    def test_stride_two_shape(self, rng):
        p = init_res_unit(16, 32, 2, rng)
        out = res_unit_forward(p, Tensor(rng.standard_normal((16, 92, 92)).astype(np.float32)), 2)
        assert out.shape == (32, 46, 46)

    def test_shape_mismatch_rejected(self, rng):
        p = init_res_unit(4, 8, 1, rng)
        p.projection = None
        with pytest.raises(ShapeError, match="shortcut"):
            res_unit_forward(p, Tensor(np.zeros((4, 6, 6))), 1)

    def test_bad_stride(self, rng):
        with pytest.raises(ValueError):
            res_unit_forward(init_res_unit(2, 2, 1, rng), Tensor(np.zeros((2, 4, 4))), 3)

    @pytest.mark.parametrize("cin,cout,stride", [(2, 2, 1), (2, 3, 2), (3, 2, 1)])
    def test_gradients(self, rng, cin, cout, stride):
        p = as64(init_res_unit(cin, cout, stride, rng))
        # nonzero biases move the relu kinks away from the evaluation point
        p.conv1_b.data[:] = rng.uniform(0.1, 0.3, cout)
        p.conv2_b.data[:] = rng.uniform(0.1, 0.3, cout)
        x = Tensor(rng.standard_normal((cin, 6, 6)))
        ts = [x, p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b] + ([p.projection] if p.projection is not None else [])

        def fn(x, w1, b1, w2, b2, *proj):
            q = ResUnitParams(w1, b1, w2, b2, proj[0] if proj else None)
            return res_unit_forward(q, x, stride)

        assert check_gradients(fn, ts) < 1e-5


class TestEncoder:
    def test_full_size_shapes(self, rng):
        cfg = EncoderConfig(units_per_stage=1, width=4)
        half, quarter = encoder_forward(init_encoder(cfg, rng), Tensor(np.zeros((1, 184, 184), np.float32)))
        assert half.shape == (8, 92, 92) and quarter.shape == (16, 46, 46)

    def test_phantom_shapes(self, rng):
        cfg = EncoderConfig.preset("desk")
        half, quarter = encoder_forward(init_encoder(cfg, rng), Tensor(rng.random((1, 48, 48))))
        assert half.shape == (16, 24, 24) and quarter.shape == (32, 12, 12)

    def test_batch_matches_frames(self, rng):
        p = init_encoder(EncoderConfig(1, 4), rng)
        frames = rng.random((3, 1, 16, 16)).astype(np.float32)
        bh, bq = encoder_forward(p, Tensor(frames))
        for k in range(3):
            h, q = encoder_forward(p, Tensor(frames[k]))
            np.testing.assert_allclose(bh.data[k], h.data, atol=1e-6)
            np.testing.assert_allclose(bq.data[k], q.data, atol=1e-6)

    def test_indivisible_rejected(self, rng):
        p = init_encoder(EncoderConfig(1, 2), rng)
        with pytest.raises(ShapeError, match="divisible by 4"):
            encoder_forward(p, Tensor(np.zeros((1, 18, 16))))

    def test_layer_count(self, rng):
        assert weighted_layer_count(init_encoder(EncoderConfig.preset("full"), rng)) == 56
        assert weighted_layer_count(init_encoder(EncoderConfig.preset("desk"), rng)) == 20

    def test_presets(self):
        assert EncoderConfig.preset("full").widths == (16, 32, 64)
        with pytest.raises(ValueError, match="preset"):
            EncoderConfig.preset("huge")

    def test_deterministic(self, rng):
        p = init_encoder(EncoderConfig(2, 4), rng)
        x = Tensor(rng.random((1, 16, 16)))
        a, b = encoder_forward(p, x), encoder_forward(p, x)
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_zero_branches_stay_finite(self, rng):
        p = init_encoder(EncoderConfig(2, 4), rng)
        for stage in p.stages:
            for u in stage:
                for t in (u.conv1_w, u.conv1_b, u.conv2_w, u.conv2_b):
                    t.data[:] = 0
        half, quarter = encoder_forward(p, Tensor(rng.random((1, 16, 16))))
        assert half.shape == (8, 8, 8) and quarter.shape == (16, 4, 4)
        assert np.isfinite(half.data).all() and np.isfinite(quarter.data).all()

    def test_tiny_full_gradient(self, rng):
        p = init_encoder(EncoderConfig.preset("tiny"), rng, dtype=np.float64)
        names = [n for n, _ in p.named_tensors()]
        for n, t in p.named_tensors():
            if n.endswith("_b"):
                t.data[:] = rng.uniform(0.05, 0.2, t.shape)
        x = Tensor(rng.random((1, 8, 8)))

        def fn(x, *ts):
            return list(encoder_forward(_rebuild(p, dict(zip(names, ts))), x))

        assert check_gradients(fn, [x] + p.tensors()) < 1e-4


def _rebuild(p, lookup):
    stages = []
    for s, stage in enumerate(p.stages):
        units = []
        for u, unit in enumerate(stage):
            pre = f"encoder.stage{s}.unit{u}."
            units.append(ResUnitParams(
                lookup[pre + "conv1_w"], lookup[pre + "conv1_b"], lookup[pre + "conv2_w"], lookup[pre + "conv2_b"],
                lookup.get(pre + "projection"),
            ))
        stages.append(units)
    return EncoderParams(lookup["encoder.stem_w"], lookup["encoder.stem_b"], stages, p.widths)
