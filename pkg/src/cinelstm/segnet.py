"""Segmentation network assembly, decoder, and checkpoint files.

Three variants share one encoder and one decoder and differ only in the
temporal path between them:

``cnn``
    each frame decoded from its own encoder features.
``one-level``
    a ConvLSTM over the 1/4 features; 1/2 features enter the decoder raw.
``multi-level``
    independent ConvLSTMs over the 1/4 and 1/2 features, fused in the
    decoder.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convlstm import ConvLstmParams, CycleConfig, init_convlstm, run_cycle
from .encoder import EncoderConfig, EncoderParams, encoder_forward, init_encoder
from .tensorcore import (
    ShapeError,
    Tensor,
    concat_channels,
    conv_transpose2d,
    sigmoid_map,
    stack,
    tensor_from_bytes,
    tensor_to_bytes,
    unstack,
)

VARIANTS = ("cnn", "one-level", "multi-level")
_ALIASES = {"cnn-only": "cnn", "cnn": "cnn", "one-level": "one-level", "multi-level": "multi-level"}

CHECKPOINT_MAGIC = b"SEGM"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def canonical_variant(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}") from None


@dataclass
class DecoderParams:
    up_w: Tensor
    up_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("decoder.up_w", self.up_w),
            ("decoder.up_b", self.up_b),
            ("decoder.out_w", self.out_w),
            ("decoder.out_b", self.out_b),
        ]


def init_decoder(low_ch: int, high_ch: int, rng: np.random.Generator, dtype=np.float32) -> DecoderParams:
    up_ch = high_ch
    b1 = np.sqrt(3.0 / (low_ch * 4))
    b2 = np.sqrt(3.0 / ((up_ch + high_ch) * 4))
    return DecoderParams(
        up_w=Tensor(rng.uniform(-b1, b1, (low_ch, up_ch, 4, 4)).astype(dtype), requires_grad=True),
        up_b=Tensor(np.zeros(up_ch, dtype=dtype), requires_grad=True),
        out_w=Tensor(rng.uniform(-b2, b2, (up_ch + high_ch, 1, 4, 4)).astype(dtype), requires_grad=True),
        out_b=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def decode(d: DecoderParams, low: Tensor, high: Tensor) -> Tensor:
    """Upsample ``low``, join with ``high``, upsample again to a probability map.

    Works on single maps ``(C, h, w)`` or frame stacks ``(N, C, h, w)``.
    """
    if d.out_w.shape[1] != 1:
        raise ShapeError(f"decoder output kernel must produce 1 channel, has {d.out_w.shape[1]}")
    up = conv_transpose2d(low, d.up_w, d.up_b, stride=2, crop=1)
    if up.shape[-2:] != high.shape[-2:]:
        raise ShapeError(f"decoder: upsampled low-resolution map {up.shape} does not match {high.shape}")
    joined = concat_channels(up, high)
    return sigmoid_map(conv_transpose2d(joined, d.out_w, d.out_b, stride=2, crop=1))


@dataclass
class SegModel:
    variant: str
    encoder: EncoderParams
    decoder: DecoderParams
    lstm_quarter: ConvLstmParams | None = None
    lstm_half: ConvLstmParams | None = None
    cycle: CycleConfig = field(default_factory=CycleConfig)
    input_size: tuple[int, int] = (48, 48)
    seed: int = 0

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Parameters in the canonical checkpoint order."""
        out = self.encoder.named_tensors()
        if self.lstm_quarter is not None:
            out += [(f"lstm_quarter.{n}", t) for n, t in self.lstm_quarter.named_tensors()]
        if self.lstm_half is not None:
            out += [(f"lstm_half.{n}", t) for n, t in self.lstm_half.named_tensors()]
        out += self.decoder.named_tensors()
        return out

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def copy(self) -> "SegModel":
        return copy.deepcopy(self)

    def require(self, variant: str | None = None) -> str:
        variant = canonical_variant(variant or self.variant)
        if variant in ("one-level", "multi-level") and self.lstm_quarter is None:
            raise ValueError(f"variant {variant!r} needs lstm_quarter, which this model is missing")
        if variant == "multi-level" and self.lstm_half is None:
            raise ValueError("variant 'multi-level' needs lstm_half, which this model is missing")
        return variant

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(units_per_stage=self.encoder.units_per_stage, width=self.encoder.widths[0])


def build_model(
    variant: str,
    encoder_cfg: EncoderConfig | None = None,
    input_size: tuple[int, int] = (48, 48),
    cycle: CycleConfig | None = None,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> SegModel:
    """Freshly initialized model; parameter groups follow the variant."""
    variant = canonical_variant(variant)
    encoder_cfg = encoder_cfg or EncoderConfig()
    cycle = cycle or CycleConfig()
    h, w = input_size
    if h % 4 or w % 4:
        raise ShapeError(f"input size {h}x{w} must be divisible by 4")
    rng = rng if rng is not None else np.random.default_rng(seed)
    enc = init_encoder(encoder_cfg, rng)
    _, c_half, c_quarter = encoder_cfg.widths
    dec = init_decoder(c_quarter, c_half, rng)
    model = SegModel(variant, enc, dec, cycle=cycle, input_size=(h, w), seed=seed)
    if variant != "cnn":
        attach_lstms(model, variant, rng)
    return model


def attach_lstms(model: SegModel, variant: str, rng: np.random.Generator) -> SegModel:
    """Add the recurrent blocks a variant needs (in place); switches the variant."""
    variant = canonical_variant(variant)
    h, w = model.input_size
    _, c_half, c_quarter = model.encoder.widths
    if variant in ("one-level", "multi-level") and model.lstm_quarter is None:
        model.lstm_quarter = init_convlstm(c_quarter, c_quarter, h // 4, w // 4, rng=rng)
    if variant == "multi-level" and model.lstm_half is None:
        model.lstm_half = init_convlstm(c_half, c_half, h // 2, w // 2, rng=rng)
    model.variant = variant
    return model


def _frames_tensor(frames) -> Tensor:
    if hasattr(frames, "frames"):
        frames = frames.frames
    if isinstance(frames, Tensor):
        arr = frames.data
    else:
        arr = np.asarray(frames, dtype=np.float32) if not isinstance(frames, np.ndarray) else frames
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"expected frames shaped (M, H, W) or (M, 1, H, W), got {arr.shape}")
    return Tensor(arr.astype(np.float32, copy=False))


def forward_sequence(model: SegModel, frames, variant: str | None = None) -> Tensor:
    """Probability maps ``(M, 1, H, W)`` for one cardiac cycle, in frame order.

    ``frames`` may be a CineSequence, an array ``(M, H, W)`` or a Tensor
    ``(M, 1, H, W)``. ``variant`` overrides the model's own tag; the model
    must carry the parameter groups that variant needs.
    """
    variant = model.require(variant)
    x = frames if isinstance(frames, Tensor) and frames.ndim == 4 else _frames_tensor(frames)
    m = x.shape[0]
    if m != model.cycle.frames:
        raise ValueError(f"sequence has {m} frames, model cycle length is {model.cycle.frames}")
    half, quarter = encoder_forward(model.encoder, x)
    if variant in ("one-level", "multi-level"):
        quarter = stack(run_cycle(model.lstm_quarter, unstack(quarter), model.cycle))
    if variant == "multi-level":
        half = stack(run_cycle(model.lstm_half, unstack(half), model.cycle))
    return decode(model.decoder, quarter, half)


def predict_maps(model: SegModel, frames, variant: str | None = None) -> np.ndarray:
    """Untaped inference; returns ``(M, H, W)`` probabilities."""
    return forward_sequence(model, frames, variant).data[:, 0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _blob_shape(shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) == 1:
        return (shape[0], 1, 1)
    if len(shape) == 3:
        return shape
    if len(shape) == 4:
        return (shape[0] * shape[1], shape[2], shape[3])
    raise ShapeError(f"cannot store parameter of shape {shape}")


def save_checkpoint(model: SegModel, path) -> None:
    """Write manifest plus one ``TNS1`` blob per parameter, float32."""
    entries, blobs, offset = [], [], 0
    for name, t in model.named_tensors():
        blob = tensor_to_bytes(t.data.reshape(_blob_shape(t.shape)))
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": "segm",
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "encoder": {"units_per_stage": model.encoder.units_per_stage, "width": model.encoder.widths[0]},
        "cycle": {"frames": model.cycle.frames, "passes": model.cycle.passes},
        "input_size": list(model.input_size),
        "seed": model.seed,
        "has_lstm_quarter": model.lstm_quarter is not None,
        "has_lstm_half": model.lstm_half is not None,
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, variant: str | None = None) -> SegModel:
    """Read a checkpoint; with ``variant`` set, also enforce its parameter groups."""
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint ({len(buf)} bytes)")
    magic, version, mlen = _PREFIX.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = _PREFIX.size + mlen
    if start > len(buf):
        raise ValueError(f"{path}: truncated manifest")
    manifest = json.loads(buf[_PREFIX.size:start])
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        at = start + e["offset"]
        if at + e["nbytes"] > len(buf):
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arr, end = tensor_from_bytes(buf, at)
        if end - at != e["nbytes"]:
            raise ValueError(f"{path}: size mismatch for {e['name']}")
        arrays[e["name"]] = arr.reshape(e["shape"])
    expected_end = start + sum(e["nbytes"] for e in manifest["tensors"])
    if expected_end != len(buf):
        raise ValueError(f"{path}: {len(buf) - expected_end} unexpected trailing bytes")

    enc_cfg = EncoderConfig(**manifest["encoder"])
    model = build_model(
        "cnn",
        enc_cfg,
        input_size=tuple(manifest["input_size"]),
        cycle=CycleConfig(**manifest["cycle"]),
        seed=manifest["seed"],
    )
    if manifest["has_lstm_quarter"]:
        attach_lstms(model, "one-level", np.random.default_rng(0))
    if manifest["has_lstm_half"]:
        attach_lstms(model, "multi-level", np.random.default_rng(0))
    model.variant = canonical_variant(manifest["variant"])
    params = model.named_tensors()
    names = [n for n, _ in params]
    if names != list(arrays):
        missing = sorted(set(names) - set(arrays))
        extra = sorted(set(arrays) - set(names))
        raise ValueError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, t in params:
        if arrays[name].shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name]
    if variant is not None:
        model.require(variant)
    return model
