"""Fully convolutional residual feature extractor.

Three stages of residual units; stages two and three open with a stride-2
unit, so their outputs sit at 1/2 and 1/4 of the input resolution. Those two
maps feed the recurrent blocks. No normalization layers are used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import ShapeError, Tensor, add, conv2d, relu_map


@dataclass
class ResUnitParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    projection: Tensor | None = None

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [
            (prefix + "conv1_w", self.conv1_w),
            (prefix + "conv1_b", self.conv1_b),
            (prefix + "conv2_w", self.conv2_w),
            (prefix + "conv2_b", self.conv2_b),
        ]
        if self.projection is not None:
            out.append((prefix + "projection", self.projection))
        return out


@dataclass
class EncoderParams:
    stem_w: Tensor
    stem_b: Tensor
    stages: list[list[ResUnitParams]]
    widths: tuple[int, int, int]

    @property
    def units_per_stage(self) -> int:
        return len(self.stages[0])

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("encoder.stem_w", self.stem_w), ("encoder.stem_b", self.stem_b)]
        for s, stage in enumerate(self.stages):
            for u, unit in enumerate(stage):
                out.extend(unit.named_tensors(f"encoder.stage{s}.unit{u}."))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


@dataclass(frozen=True)
class EncoderConfig:
    units_per_stage: int = 3
    width: int = 8
    in_channels: int = 1

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.width, 2 * self.width, 4 * self.width)

    @classmethod
    def preset(cls, name: str) -> "EncoderConfig":
        presets = {"desk": cls(3, 8), "full": cls(9, 16), "tiny": cls(1, 2)}
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown encoder preset {name!r}; choose from {sorted(presets)}") from None


STRIDES = (1, 2, 2)


def _he_uniform(rng, shape, gain=1.0, dtype=np.float32) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = gain * np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _zeros(n, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def init_res_unit(cin: int, cout: int, stride: int, rng, residual_gain: float = 1.0, dtype=np.float32) -> ResUnitParams:
    proj = None
    if stride != 1 or cin != cout:
        proj = _he_uniform(rng, (cout, cin, 1, 1), gain=0.5, dtype=dtype)
    return ResUnitParams(
        conv1_w=_he_uniform(rng, (cout, cin, 3, 3), dtype=dtype),
        conv1_b=_zeros(cout, dtype),
        conv2_w=_he_uniform(rng, (cout, cout, 3, 3), gain=residual_gain, dtype=dtype),
        conv2_b=_zeros(cout, dtype),
        projection=proj,
    )


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> EncoderParams:
    widths = cfg.widths
    # shrink residual branches with depth so the un-normalized stack stays well scaled
    gain = 1.0 / np.sqrt(3 * cfg.units_per_stage)
    stages = []
    cin = widths[0]
    for width, stride in zip(widths, STRIDES):
        units = []
        for u in range(cfg.units_per_stage):
            units.append(init_res_unit(cin, width, stride if u == 0 else 1, rng, gain, dtype))
            cin = width
        stages.append(units)
    return EncoderParams(
        stem_w=_he_uniform(rng, (widths[0], cfg.in_channels, 3, 3), dtype=dtype),
        stem_b=_zeros(widths[0], dtype),
        stages=stages,
        widths=widths,
    )


def res_unit_forward(p: ResUnitParams, x: Tensor, stride: int = 1) -> Tensor:
    """``relu(shortcut(x) + conv2(relu(conv1(x))))`` with a strided conv1."""
    if stride not in (1, 2):
        raise ValueError(f"residual unit stride must be 1 or 2, got {stride}")
    branch = relu_map(conv2d(x, p.conv1_w, p.conv1_b, stride, 1))
    branch = conv2d(branch, p.conv2_w, p.conv2_b, 1, 1)
    shortcut = x if p.projection is None else conv2d(x, p.projection, None, stride, 0)
    if shortcut.shape != branch.shape:
        raise ShapeError(f"residual unit: shortcut {shortcut.shape} vs branch {branch.shape}")
    return relu_map(add(shortcut, branch))


def encoder_forward(p: EncoderParams, frame: Tensor) -> tuple[Tensor, Tensor]:
    """Encode ``(1, H, W)`` (or a stack ``(N, 1, H, W)``) into 1/2 and 1/4 maps."""
    h, w = frame.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"encoder input {h}x{w} must have height and width divisible by 4")
    x = relu_map(conv2d(frame, p.stem_w, p.stem_b, 1, 1))
    taps = []
    for stage, stride in zip(p.stages, STRIDES):
        for u, unit in enumerate(stage):
            x = res_unit_forward(unit, x, stride if u == 0 else 1)
        taps.append(x)
    return taps[1], taps[2]


def weighted_layer_count(p: EncoderParams, head_layers: int = 1) -> int:
    """Stem + two convolutions per unit + the segmentation head.

    Projection shortcuts are not counted, matching the usual residual
    network bookkeeping; nine units per stage gives 56.
    """
    return 1 + 2 * sum(len(s) for s in p.stages) + head_layers
