"""Central finite-difference oracle for the analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


class NondeterministicError(RuntimeError):
    pass


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"objective must return a scalar, got shape {out.shape}")
    return float(np.real(out.data))


# central-difference stencils: (offsets in units of the step, weights)
STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((2.0, 1.0, -1.0, -2.0), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float, points: int = 2) -> np.ndarray:
    """Central differences of ``f`` over every coordinate of ``x``.

    ``points=2`` is the usual (f(x+h) - f(x-h)) / 2h; ``points=4`` is the
    fourth-order stencil, which tolerates a larger step and so loses less to
    round-off on coordinates whose gradient is tiny.  Complex coordinates are
    perturbed along the real and imaginary axes independently; the result
    uses the same ``dRe + i dIm`` convention as the analytic gradient.
    """
    if points not in STENCILS:
        raise ValueError(f"points must be one of {sorted(STENCILS)}")
    offsets, weights = STENCILS[points]
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("finite differences need a contiguous tensor")
    out = np.zeros(flat.shape, dtype=x.dtype)
    dirs = (1.0, 1j) if x.is_complex else (1.0,)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            for d in dirs:
                acc = 0.0
                for o, w in zip(offsets, weights):
                    flat[k] = orig + o * step * d
                    acc += w * _scalar(f())
                flat[k] = orig
                out[k] += d * acc / step
    return out.reshape(x.shape)


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        with Tape() as tape:
            loss = f()
            backward(loss, tape=tape)
        return [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]
    finally:
        for x, (rg, g) in zip(xs, saved):
            x.requires_grad, x.grad = rg, g


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(analytic) or np.iscomplexobj(numeric):
        a = np.concatenate([np.real(analytic).ravel(), np.imag(analytic).ravel()])
        n = np.concatenate([np.real(numeric).ravel(), np.imag(numeric).ravel()])
    else:
        a, n = analytic.ravel(), numeric.ravel()
    return np.abs(a - n) / (np.abs(n) + 1e-8)


def finite_difference_check(f: Callable, x: Tensor | Sequence[Tensor], step: float = 1e-5,
                            points: int = 2) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is called as ``f(x)`` and must return a real scalar Tensor.  ``x``
    may be a single tensor or a list of tensors (e.g. all model parameters),
    in which case ``f`` receives the list.  The error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``; real and imaginary parts
    count as separate coordinates.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = lambda: f(x)  # noqa: E731
    with no_grad():
        v1, v2 = call().data.copy(), call().data.copy()
    if not np.array_equal(v1, v2):
        raise NondeterministicError("objective returned different values on repeated evaluation")
    ana = analytic_grads(call, xs)
    worst = 0.0
    for t, a in zip(xs, ana):
        if t.size == 0:
            continue
        num = numeric_grad(call, t, step, points)
        worst = max(worst, float(relative_errors(a, num).max()))
    return worst
