"""Primitive differentiable operations.

Every op computes its forward value with numpy and registers a vector-Jacobian
product on the current tape.  For holomorphic maps the VJP multiplies by the
conjugate derivative, which realises the conjugate gradient convention
documented in :mod:`fdm.autodiff.tensor`.

Broadcasting is limited to a missing leading batch: a lower-rank operand must
match the trailing dimensions of the other exactly.  Anything else goes
through :func:`expand`.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _conj(x: np.ndarray) -> np.ndarray:
    return np.conj(x) if x.dtype.kind == "c" else x


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product; covers complex multiplication as well."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return (_sum_to(g * _conj(b.data), a.shape) if a.requires_grad else None,
                _sum_to(g * _conj(a.data), b.shape) if b.requires_grad else None)

    return record("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        gb = g / _conj(b.data)
        return _sum_to(gb, a.shape), _sum_to(-gb * _conj(out), b.shape)

    return record("div", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power takes a constant exponent")
    c = float(exponent)
    return record("pow", (a,), a.data ** c,
                  lambda g: (g * _conj(c * a.data ** (c - 1.0)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * _conj(out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", (a,), np.log(a.data), lambda g: (g / _conj(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (g / (2.0 * _conj(out)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * _conj(1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("sigmoid is defined for real tensors only")
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


# -------------------------------------------------------------- complex views
def real(a) -> Tensor:
    a = as_tensor(a)
    return record("real", (a,), np.ascontiguousarray(a.data.real),
                  lambda g: (g.astype(a.dtype),))


def imag(a) -> Tensor:
    a = as_tensor(a)
    return record("imag", (a,), np.ascontiguousarray(a.data.imag),
                  lambda g: (1j * g,))


def make_complex(re, im) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    if re.shape != im.shape:
        raise ShapeError(f"complex: shapes {re.shape} and {im.shape} differ")
    if re.is_complex or im.is_complex:
        raise TypeError("complex() takes real parts")
    return record("complex", (re, im), re.data + 1j * im.data,
                  lambda g: (g.real.copy(), g.imag.copy()))


def conj(a) -> Tensor:
    a = as_tensor(a)
    return record("conj", (a,), np.conj(a.data), lambda g: (np.conj(g),))


# -------------------------------------------------------------------- linear
def matmul(a, b) -> Tensor:
    """``a @ b`` with an optional leading batch on either side.

    1-D right operands are treated as column vectors.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul: scalar operand")
    if a.ndim == 1:
        raise ShapeError(f"matmul: left operand must be at least 2-D, got {a.shape}")
    vec = b.ndim == 1
    bm = b.data[:, None] if vec else b.data
    if a.shape[-1] != bm.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ab, bb = a.shape[:-2], bm.shape[:-2]
    if ab and bb and ab != bb:
        raise ShapeError(f"matmul: batch shapes differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, bm)

    def vjp(g):
        gm = g[..., None] if vec else g
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(gm, _conj(np.swapaxes(bm, -1, -2)))
            if ga.ndim > a.ndim:
                ga = ga.reshape((-1,) + a.shape).sum(axis=0)
        if b.requires_grad:
            if bm.ndim == 2 and a.ndim > 2:
                # fold the batch into rows: one GEMM instead of a batched one plus a sum
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = _conj(a2.T) @ gm.reshape(-1, gm.shape[-1])
            else:
                gb = np.matmul(_conj(np.swapaxes(a.data, -1, -2)), gm)
                if gb.ndim > bm.ndim:
                    gb = gb.reshape((-1,) + bm.shape).sum(axis=0)
            if vec:
                gb = gb[:, 0]
        return ga, gb

    return record("matmul", (a, b), out[..., 0] if vec else out, vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), np.asarray(out), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


# -------------------------------------------------------------------- shapes
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    return record("expand", (a,), np.ascontiguousarray(out), lambda g: (_sum_to(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        np.add.at(ga, index, g)
        return (ga,)

    return record("slice", (a,), np.array(a.data[index]), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return record("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax),
                  lambda g: tuple(np.split(g, sizes, axis=ax)))


def gather(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("gather ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: id out of range [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros(table.shape, dtype=np.result_type(table.dtype, g.dtype))
        np.add.at(gt, ids, g)
        return (gt,)

    return record("gather", (table,), table.data[ids], vjp)


def scatter_add(src, ids, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into ``n_rows`` buckets given by ``ids``."""
    src = as_tensor(src)
    ids = np.asarray(ids)
    if ids.shape != src.shape[: ids.ndim]:
        raise ShapeError(f"scatter_add: ids {ids.shape} do not index src {src.shape}")
    out = np.zeros((n_rows,) + src.shape[ids.ndim:], dtype=src.dtype)
    np.add.at(out, ids, src.data)
    return record("scatter_add", (src,), out, lambda g: (g[ids],))


def pick(a, idx) -> Tensor:
    """``a[..., idx[...]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} vs {a.shape}")
    ix = idx[..., None]

    def vjp(g):
        ga = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        np.put_along_axis(ga, ix, g[..., None], axis=-1)
        return (ga,)

    return record("pick", (a,), np.take_along_axis(a.data, ix, axis=-1)[..., 0], vjp)


# -------------------------------------------------------------- normalisers
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (a,), out,
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return record("log_softmax", (a,), out,
                  lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def masked_softmax(a, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; empty rows give zeros."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    big = np.where(mask, a.data, -np.inf)
    m = big.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)
    return record("masked_softmax", (a,), out,
                  lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets``; ``weights`` selects positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    nll = neg(pick(log_softmax(logits, axis=-1), targets))
    if weights is None:
        return mean(nll)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: all weights are zero")
    return div(sum(mul(nll, Tensor(w))), float(total))
