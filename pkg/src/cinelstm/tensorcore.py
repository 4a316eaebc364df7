"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array laid out channel-major, either
``(C, H, W)`` for a single feature map or ``(N, C, H, W)`` for the frames of
one sequence processed together. Scalars (shape ``()``) appear as losses.

Differentiation is tape based. Operations executed inside a ``with Tape():``
block whose inputs require gradients are recorded in execution order, so the
tape is topologically sorted by construction. :meth:`Tape.backward` walks the
records in reverse.

Convolutions are cross-correlations (no kernel flip) with zero padding.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "conv2d",
    "conv_transpose2d",
    "sigmoid_map",
    "tanh_map",
    "relu_map",
    "hadamard",
    "add",
    "concat",
    "concat_channels",
    "slice_axis",
    "stack",
    "unstack",
    "select",
    "sum_all",
    "mean_all",
    "scale",
    "custom_op",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An array value that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    @classmethod
    def zeros(cls, shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Record:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations for one backward pass.

    Used as a context manager; a tape is meant to live for a single
    training step and be discarded afterwards.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, vjp: Callable) -> None:
        self.records.append(_Record(tuple(inputs), output, vjp))

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf.

        Gradients are written to ``leaf.grad`` and also returned keyed by
        ``id(leaf)``. Leaves listed in ``leaves`` that the loss does not
        depend on receive zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._closed:
            raise RuntimeError("tape already consumed; record a new one per step")
        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen_leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen_leaves[id(t)] = t
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if loss.requires_grad and id(loss) not in produced:
            seen_leaves[id(loss)] = loss
        for t in leaves or ():
            if t.requires_grad:
                seen_leaves[id(t)] = t
        out: dict[int, np.ndarray] = {}
        for key, leaf in seen_leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            out[key] = leaf.grad
        self.records.clear()
        self._closed = True
        return out


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None, tape: Tape | None = None):
    """Run reverse-mode differentiation on ``tape`` (default: the active one)."""
    tape = tape or _active_tape()
    if tape is None:
        raise RuntimeError("no active tape; wrap the forward pass in `with Tape():`")
    return tape.backward(loss, leaves)


def custom_op(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and tape it with ``vjp`` (cotangent -> input grads)."""
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(inputs, res, vjp)
    return res


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape ``(C*kh*kw, N*ho*wo)`` from padded ``(N, C, Hp, Wp)``."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into ``out_shape``."""
    n, c = out_shape[:2]
    buf = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return buf


def _to_cm(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def _from_cm(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> (N, C, H, W)."""
    return np.ascontiguousarray(m.reshape(m.shape[0], n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
    kernel : Tensor
        ``(C_out, C_in, kh, kw)``.
    bias : Tensor, optional
        ``(C_out,)``.
    stride, padding : int
        Stride and symmetric zero padding in pixels.

    Returns
    -------
    Tensor with spatial size ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    xb, squeeze = _as_batch(x.data)
    w = kernel.data
    if w.ndim != 4 or w.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {w.shape}")
    n, c, h, wd = xb.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (padding {padding})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.reshape(o, c * kh * kw)
    om = wm @ cols
    if bias is not None:
        om += bias.data[:, None]
    out = _from_cm(om, n, ho, wo)
    if squeeze:
        out = out[0]

    def vjp(g):
        gm = _to_cm(g[None] if squeeze else g)
        gx = gw = gbias = None
        if x.requires_grad:
            gxp = _col2im(wm.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gx = gx[0] if squeeze else gx
        if kernel.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = gm.sum(axis=1)
        return gx, gw, gbias

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_op(out, inputs, vjp)


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    crop: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution, the linear adjoint of :func:`conv2d`.

    ``kernel`` uses the same array layout as the conv2d kernel it is adjoint
    to, read here as ``(C_in, C_out, kh, kw)``: the input has
    ``kernel.shape[0]`` channels and the output ``kernel.shape[1]``. Output
    extent is ``(H - 1) * stride + kh - 2 * crop + output_padding``; with a
    4x4 kernel, stride 2 and crop 1 this is exactly ``2 * H``.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if crop < 0 or output_padding < 0:
        raise ValueError("conv_transpose2d: crop and output_padding must be >= 0")
    xb, squeeze = _as_batch(x.data)
    w = kernel.data
    if w.ndim != 4 or w.shape[0] != xb.shape[1]:
        raise ShapeError(f"conv_transpose2d: kernel {w.shape} incompatible with input {x.shape}")
    n, ci, h, wd = xb.shape
    _, co, kh, kw = w.shape
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match kernel {w.shape}")
    full_h = (h - 1) * stride + kh + output_padding
    full_w = (wd - 1) * stride + kw + output_padding
    ho = full_h - 2 * crop
    wo = full_w - 2 * crop
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: crop {crop} leaves empty output for input {x.shape}")
    wm = w.reshape(ci, co * kh * kw)
    xm = _to_cm(xb)
    full = _col2im(wm.T @ xm, (n, co, full_h, full_w), kh, kw, stride, h, wd)
    out = full[:, :, crop : crop + ho, crop : crop + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    else:
        out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def vjp(g):
        gb = g[None] if squeeze else g
        gfull = np.zeros((n, co, full_h, full_w), dtype=gb.dtype)
        gfull[:, :, crop : crop + ho, crop : crop + wo] = gb
        gcols = _im2col(gfull, kh, kw, stride, h, wd)
        gx = gw = gbias = None
        if x.requires_grad:
            gx = _from_cm(wm @ gcols, n, h, wd)
            gx = gx[0] if squeeze else gx
        if kernel.requires_grad:
            gw = (xm @ gcols.T).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_op(out, inputs, vjp)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def sigmoid_map(x: Tensor) -> Tensor:
    y = expit(x.data)
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh_map(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu_map(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return custom_op(y, (x,), lambda g: (g * mask,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return custom_op(x.data * factor, (x,), lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return custom_op(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.data.size
    return custom_op(
        np.asarray(x.data.mean(), dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),)
    )


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat: no tensors")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        idx = [slice(None)] * nd
        parts = []
        for k, t in enumerate(tensors):
            if not t.requires_grad:
                parts.append(None)
                continue
            idx[ax] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return custom_op(out, tuple(tensors), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.shape[-2:] != b.shape[-2:] or a.ndim != b.ndim:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    return concat((a, b), axis=-3)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = x.ndim
    idx = [slice(None)] * nd
    idx[axis % nd] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return custom_op(x.data[idx], (x,), vjp)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack: no tensors")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors])
    return custom_op(out, tuple(tensors), lambda g: tuple(g[k] if t.requires_grad else None for k, t in enumerate(tensors)))


def select(x: Tensor, index: int) -> Tensor:
    """Take one entry along the leading axis."""
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[index] = g
        return (gx,)

    return custom_op(x.data[index], (x,), vjp)


def unstack(x: Tensor) -> list[Tensor]:
    """Split along the leading axis into ``x.shape[0]`` tensors."""
    return [select(x, k) for k in range(x.shape[0])]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"TNS1"
_HEADER = struct.Struct("<4s3I")


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Encode a rank-3 array as ``TNS1`` header plus little-endian float32."""
    a = np.asarray(arr)
    if a.ndim != 3:
        raise ShapeError(f"tensor blobs are rank 3, got shape {a.shape}")
    return _HEADER.pack(TENSOR_MAGIC, *a.shape) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    start = offset + _HEADER.size
    end = start + 4 * c * h * w
    if end > len(buf):
        raise ValueError(f"truncated tensor payload: need {end - start} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=start).reshape(c, h, w).astype(np.float32)
    return arr, end


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return arr
