"""Central finite-difference check of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensorcore import Tape, Tensor, custom_op


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    # <out, weights> as one taped op so every output entry carries a distinct weight
    return custom_op(np.asarray((out.data * weights).sum()), (out,), lambda g: (g * weights,))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f()
        flat[k] = orig - step
        lo = f()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * step)
    return grad


def check_gradients(
    fn: Callable[..., Tensor | Sequence[Tensor]],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gradient error over ``inputs``.

    The output(s) of ``fn`` are reduced to a scalar with fixed random
    weights. For each input the error is ``max|analytic - numeric|``
    divided by ``max|numeric|`` (floored at 1e-12). Inputs must be float64.
    """
    rng = rng or np.random.default_rng(1234)

    def outputs():
        out = fn(*inputs)
        return list(out) if isinstance(out, (list, tuple)) else [out]

    outs = outputs()
    weights = [rng.standard_normal(o.shape) for o in outs]

    def scalar() -> float:
        return float(sum((o.data * w).sum() for o, w in zip(outputs(), weights)))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        outs = outputs()
        total = None
        for o, w in zip(outs, weights):
            term = _project(o, w)
            total = term if total is None else _add_scalar(total, term)
        tape.backward(total, inputs)

    worst = 0.0
    for t in inputs:
        num = numeric_grad(scalar, t.data, step)
        denom = max(float(np.abs(num).max()), 1e-12)
        worst = max(worst, float(np.abs(t.grad - num).max()) / denom)
    return worst


def _add_scalar(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(np.asarray(a.data + b.data), (a, b), lambda g: (g, g))
