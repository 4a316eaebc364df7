"""Peephole ConvLSTM cell and the circular per-cycle chain.

Gate pre-activations are convolutions of the input frame and previous
hidden state plus an elementwise (peephole) term on the cell state::

    i = sigmoid(Wxi*x + Whi*h + Wci.c_prev + bi)
    f = sigmoid(Wxf*x + Whf*h + Wcf.c_prev + bf)
    c = f.c_prev + i.tanh(Wxc*x + Whc*h + bc)
    o = sigmoid(Wxo*x + Who*h + Wco.c + bo)      # peephole sees the new c
    h = o.tanh(c)

The cardiac cycle is periodic, so :func:`run_cycle` wraps the final state of
one pass over the frames around as the initial state of the next.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from .tensorcore import (
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    hadamard,
    sigmoid_map,
    slice_axis,
    tanh_map,
)

GATES = ("input", "forget", "cell", "output")


@dataclass
class ConvLstmParams:
    """Weights of one ConvLSTM block, in canonical serialization order.

    ``x_*`` kernels act on the input ``(hidden, in_ch, k, k)``, ``h_*`` on
    the previous hidden state ``(hidden, hidden, k, k)``. ``peep_*`` are
    elementwise weights shaped like the cell state; ``b_*`` are per-channel.
    """

    x_input: Tensor
    x_forget: Tensor
    x_cell: Tensor
    x_output: Tensor
    h_input: Tensor
    h_forget: Tensor
    h_cell: Tensor
    h_output: Tensor
    peep_input: Tensor
    peep_forget: Tensor
    peep_output: Tensor
    b_input: Tensor
    b_forget: Tensor
    b_cell: Tensor
    b_output: Tensor

    @property
    def hidden_channels(self) -> int:
        return self.x_input.shape[0]

    @property
    def in_channels(self) -> int:
        return self.x_input.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.x_input.shape[2]

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return self.peep_input.shape

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def astype(self, dtype, requires_grad: bool | None = None) -> "ConvLstmParams":
        return ConvLstmParams(
            **{
                name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad if requires_grad is None else requires_grad)
                for name, t in self.named_tensors()
            }
        )

    def validate(self) -> None:
        hid, cin, k = self.hidden_channels, self.in_channels, self.kernel_size
        for g in GATES:
            wx = getattr(self, f"x_{g}")
            wh = getattr(self, f"h_{g}")
            b = getattr(self, f"b_{g}")
            if wx.shape != (hid, cin, k, k):
                raise ShapeError(f"{g} gate: input kernel {wx.shape}, expected {(hid, cin, k, k)}")
            if wh.shape != (hid, hid, k, k):
                raise ShapeError(f"{g} gate: hidden kernel {wh.shape}, expected {(hid, hid, k, k)}")
            if b.shape != (hid,):
                raise ShapeError(f"{g} gate: bias {b.shape}, expected {(hid,)}")
        for g in ("input", "forget", "output"):
            p = getattr(self, f"peep_{g}")
            if p.shape != self.state_shape or p.shape[0] != hid:
                raise ShapeError(f"{g} gate: peephole {p.shape} does not match state {self.state_shape}")


class CellState(NamedTuple):
    hidden: Tensor
    cell: Tensor


@dataclass(frozen=True)
class CycleConfig:
    frames: int = 25
    passes: int = 2

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames per cycle must be >= 1, got {self.frames}")
        if self.passes < 1:
            raise ValueError(f"passes must be >= 1, got {self.passes}")


def init_convlstm(
    in_channels: int,
    hidden_channels: int,
    height: int,
    width: int,
    kernel_size: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> ConvLstmParams:
    """Fan-in scaled uniform kernels, zero peepholes, forget bias +1."""
    rng = rng if rng is not None else np.random.default_rng(0)
    k = kernel_size
    fan_in = (in_channels + hidden_channels) * k * k
    bound = np.sqrt(3.0 / fan_in)

    def kern(cin):
        return Tensor(rng.uniform(-bound, bound, (hidden_channels, cin, k, k)).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    state = (hidden_channels, height, width)
    params = ConvLstmParams(
        x_input=kern(in_channels),
        x_forget=kern(in_channels),
        x_cell=kern(in_channels),
        x_output=kern(in_channels),
        h_input=kern(hidden_channels),
        h_forget=kern(hidden_channels),
        h_cell=kern(hidden_channels),
        h_output=kern(hidden_channels),
        peep_input=zeros(state),
        peep_forget=zeros(state),
        peep_output=zeros(state),
        b_input=zeros(hidden_channels),
        b_forget=Tensor(np.ones(hidden_channels, dtype=dtype), requires_grad=True),
        b_cell=zeros(hidden_channels),
        b_output=zeros(hidden_channels),
    )
    return params


def zero_state(params: ConvLstmParams, dtype=None) -> CellState:
    dtype = dtype or params.peep_input.dtype
    return CellState(Tensor.zeros(params.state_shape, dtype=dtype), Tensor.zeros(params.state_shape, dtype=dtype))


class _Fused(NamedTuple):
    wx: Tensor
    wh: Tensor
    bias: Tensor


def _fuse(p: ConvLstmParams) -> _Fused:
    # one convolution per operand computes all four gates
    return _Fused(
        concat([getattr(p, f"x_{g}") for g in GATES], axis=0),
        concat([getattr(p, f"h_{g}") for g in GATES], axis=0),
        concat([getattr(p, f"b_{g}") for g in GATES], axis=0),
    )


def _project_input(p: ConvLstmParams, fused: _Fused, x: Tensor) -> Tensor:
    if x.ndim != 3 or x.channels != p.in_channels:
        raise ShapeError(f"input gate: frame {x.shape} does not provide {p.in_channels} channels")
    if x.shape[1:] != p.state_shape[1:]:
        raise ShapeError(f"input gate: frame spatial size {x.shape[1:]} differs from state {p.state_shape[1:]}")
    return conv2d(x, fused.wx, fused.bias, 1, p.kernel_size // 2)


def _advance(p: ConvLstmParams, fused: _Fused, xz: Tensor, prev: CellState) -> CellState:
    hid = p.hidden_channels
    z = add(xz, conv2d(prev.hidden, fused.wh, None, 1, p.kernel_size // 2))
    zi, zf, zc, zo = (slice_axis(z, 0, k * hid, (k + 1) * hid) for k in range(4))
    c_prev = prev.cell
    i = sigmoid_map(add(zi, hadamard(p.peep_input, c_prev)))
    f = sigmoid_map(add(zf, hadamard(p.peep_forget, c_prev)))
    c = add(hadamard(f, c_prev), hadamard(i, tanh_map(zc)))
    o = sigmoid_map(add(zo, hadamard(p.peep_output, c)))
    return CellState(hadamard(o, tanh_map(c)), c)


def _check_state(p: ConvLstmParams, prev: CellState) -> None:
    for label, t in (("hidden", prev.hidden), ("cell", prev.cell)):
        if t.shape != p.state_shape:
            raise ShapeError(f"forget gate: previous {label} state {t.shape}, expected {p.state_shape}")


def cell_step(params: ConvLstmParams, x: Tensor, prev: CellState) -> CellState:
    """Advance one frame: returns the new ``(hidden, cell)`` pair."""
    params.validate()
    _check_state(params, prev)
    fused = _fuse(params)
    return _advance(params, fused, _project_input(params, fused, x), prev)


def run_cycle(
    params: ConvLstmParams,
    inputs: Sequence[Tensor],
    cfg: CycleConfig | None = None,
    initial: CellState | None = None,
) -> list[Tensor]:
    """Run the circular chain over one cardiac cycle.

    The first pass starts from zeros (or ``initial``); each later pass
    starts from the final state of the previous one without detaching, so
    gradients flow around the loop. Returns the hidden states of the last
    pass, one per frame.
    """
    if len(inputs) == 0:
        raise ValueError("run_cycle: empty input sequence")
    cfg = cfg or CycleConfig(frames=len(inputs))
    if len(inputs) != cfg.frames:
        raise ValueError(f"run_cycle: got {len(inputs)} frames, cycle length is {cfg.frames}")
    shape0 = inputs[0].shape
    for t, x in enumerate(inputs):
        if x.shape != shape0:
            raise ShapeError(f"run_cycle: frame {t} has shape {x.shape}, frame 0 has {shape0}")
    params.validate()
    state = initial if initial is not None else zero_state(params, dtype=inputs[0].dtype)
    _check_state(params, state)
    fused = _fuse(params)
    projected = [_project_input(params, fused, x) for x in inputs]
    hidden: list[Tensor] = []
    for _ in range(cfg.passes):
        hidden = []
        for xz in projected:
            state = _advance(params, fused, xz, state)
            hidden.append(state.hidden)
    return hidden


def run_cycle_states(params: ConvLstmParams, inputs: Sequence[Tensor], passes: int) -> list[CellState]:
    """Final state after each pass; used to inspect the circular fixpoint."""
    params.validate()
    state = zero_state(params, dtype=inputs[0].dtype)
    fused = _fuse(params)
    projected = [_project_input(params, fused, x) for x in inputs]
    out = []
    for _ in range(passes):
        for xz in projected:
            state = _advance(params, fused, xz, state)
        out.append(state)
    return out
