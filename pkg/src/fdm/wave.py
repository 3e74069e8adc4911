"""Wave component: Givens-rotation recurrence with a learned measurement gate.

One layer's wave branch maps a real input sequence ``x`` (B,T,d) to complex
states ``h`` (B,T,D):

1. ``c = CausalConv(x)`` (depthwise, left zero padding).
2. ``s_eff(t) = beta_t * log(t+2) + W_pos . [sin(pi t/T), cos(pi t/T)]`` with
   ``beta_t = c_t . W_beta``, and ``p_t = sigmoid(s_eff + mu) * 0.5 + eps``.
3. Pass 1: ``h1_t = (1-p_t) R(theta_t) h1_{t-1} + p_t (W_r c_t + i W_i c_t)``.
4. ``delta_t = R'(phi_t) h1_t - h1_t`` with a second rotation set ``R'``.
5. Pass 2 repeats step 3 with injection ``W_r c_t + i W_i c_t + g * delta_t``,
   ``g = sigmoid(gate)``; theta and p are shared with pass 1.

Adding the complex ``g * delta`` puts Re(delta) on the real channel and
Im(delta) on the imaginary channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import NumericError, Tensor, is_checked, no_grad, ops, record


# ------------------------------------------------------------------ rotations
@dataclass(frozen=True)
class GivensRotationSet:
    """Disjoint coordinate pairs plus the projection producing their angles."""

    pairs: np.ndarray  # (G, 2) int64, i < j
    dim: int
    projection: Tensor | None = None  # (d_in, G)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= self.dim):
            raise IndexError(f"rotation pair index out of range for D={self.dim}")
        if np.any(pairs[:, 0] >= pairs[:, 1]):
            raise ValueError("rotation pairs must satisfy i < j")
        if len(np.unique(pairs)) != pairs.size:
            raise ValueError("rotation pairs must be disjoint")
        if self.projection is not None and self.projection.shape[-1] != len(pairs):
            raise ValueError("angle projection width differs from pair count")

    @classmethod
    def adjacent(cls, dim: int, n_pairs: int | None = None, projection: Tensor | None = None):
        n = dim // 2 if n_pairs is None else n_pairs
        if 2 * n > dim:
            raise ValueError(f"{n} disjoint pairs do not fit in D={dim}")
        pairs = np.stack([np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2)], axis=1)
        return cls(pairs, dim, projection)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def pi(self) -> np.ndarray:
        return np.ascontiguousarray(self.pairs[:, 0])

    @property
    def pj(self) -> np.ndarray:
        return np.ascontiguousarray(self.pairs[:, 1])


def apply_givens(rot: GivensRotationSet, theta, h) -> np.ndarray:
    """Apply the rotation set with angles ``theta`` to complex vector(s) ``h``."""
    theta = np.asarray(theta, dtype=np.float64)
    h = np.asarray(h, dtype=np.complex128)
    if theta.shape[-1] != rot.n_pairs:
        raise ValueError(f"expected {rot.n_pairs} angles, got {theta.shape[-1]}")
    if h.shape[-1] != rot.dim:
        raise ValueError(f"expected vectors of size {rot.dim}, got {h.shape[-1]}")
    lead = h.shape[:-1]
    hh = np.ascontiguousarray(h.reshape(-1, rot.dim))
    th = np.ascontiguousarray(np.broadcast_to(theta, lead + (rot.n_pairs,)).reshape(-1, rot.n_pairs))
    return _kernels.apply_rotations(hh, th, rot.pi, rot.pj).reshape(h.shape)


# ------------------------------------------------------------------- schedule
@dataclass
class MeasurementSchedule:
    W_beta: Tensor  # (d,)
    W_pos: Tensor  # (2,)
    mu: Tensor  # ()
    eps: float = 0.01
    horizon: int = 64

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("measurement horizon T must be >= 1")
        if not self.eps > 0:
            raise ValueError("measurement floor eps must be > 0")


def positional_features(positions: np.ndarray, horizon: int) -> np.ndarray:
    if horizon < 1:
        raise ValueError("measurement horizon T must be >= 1")
    ang = np.pi * np.asarray(positions, dtype=np.float64) / horizon
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def schedule_forward(sched: MeasurementSchedule, c: Tensor, positions: np.ndarray) -> tuple[Tensor, Tensor]:
    """s_eff and p for features ``c`` (B,T,d) at absolute ``positions`` (T,)."""
    positions = np.asarray(positions)
    beta = ops.matmul(c, sched.W_beta)
    log_t = Tensor(np.log(positions + 2.0))
    pos = ops.matmul(Tensor(positional_features(positions, sched.horizon)), sched.W_pos)
    s_eff = beta * log_t + pos
    p = ops.sigmoid(s_eff + sched.mu) * 0.5 + sched.eps
    return s_eff, p


def measurement_probability(t: int, x_t, sched: MeasurementSchedule) -> tuple[float, float]:
    """Scalar ``(s_eff, p)`` for feature vector ``x_t`` at position ``t``."""
    if t < 0:
        raise ValueError("position must be non-negative")
    c = Tensor(np.asarray(x_t, dtype=np.float64).reshape(1, 1, -1))
    s, p = schedule_forward(sched, c, np.array([t]))
    return float(s.data[0, 0]), float(p.data[0, 0])


# ----------------------------------------------------------------- primitives
def causal_conv(x: Tensor, weight: Tensor, history: np.ndarray | None = None) -> Tensor:
    """Depthwise causal convolution; ``history`` holds the previous k-1 inputs."""
    B, T, C = x.shape
    k = weight.shape[1]
    if weight.shape[0] != C:
        raise ValueError(f"conv weight {weight.shape} does not match {C} channels")
    if history is None:
        history = np.zeros((B, k - 1, C))
    xp = np.concatenate([history, x.data], axis=1)
    out = np.zeros((B, T, C))
    for j in range(k):
        out = out + weight.data[:, j] * xp[:, j:j + T]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros(weight.shape)
        for j in range(k):
            gxp[:, j:j + T] += weight.data[:, j] * g
            gw[:, j] = (g * xp[:, j:j + T]).sum(axis=(0, 1))
        return gxp[:, k - 1:], gw

    return record("causal_conv", (x, weight), out, vjp)


def wave_scan(p: Tensor, theta: Tensor, phi: Tensor, ur: Tensor, ui: Tensor, gate: Tensor,
              rot: GivensRotationSet, rot_h: GivensRotationSet,
              h1_0: np.ndarray | None = None, h2_0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Two-pass scan as one primitive; returns pass-2 states and pass-1 states."""
    B, T, D = ur.shape
    if not np.array_equal(rot.pairs, rot_h.pairs):
        raise ValueError("both rotation sets must share one pair layout")
    if h1_0 is None:
        h1_0 = np.zeros((B, D), dtype=np.complex128)
    if h2_0 is None:
        h2_0 = np.zeros((B, D), dtype=np.complex128)
    args = [np.ascontiguousarray(a.data, dtype=np.float64) for a in (p, theta, phi, ur, ui, gate)]
    if is_checked():
        for a in args[:5]:
            bad = np.argwhere(~np.isfinite(a))
            if len(bad):
                raise NumericError(f"non-finite wave operand at position t={bad[0][1]}")
    pi, pj = rot.pi, rot.pj
    h1_0 = np.ascontiguousarray(h1_0, dtype=np.complex128)
    h2_0 = np.ascontiguousarray(h2_0, dtype=np.complex128)
    h1, h2 = _kernels.scan_forward(*args, pi, pj, h1_0, h2_0)
    if is_checked() and not np.all(np.isfinite(h2)):
        bad = np.argwhere(~np.isfinite(h2))[0]
        raise NumericError(f"non-finite wave state at position t={bad[1]}")

    def vjp(g):
        g = np.ascontiguousarray(g, dtype=np.complex128)
        return _kernels.scan_backward(*args, pi, pj, h1_0, h2_0, h1, h2, g)

    return record("wave_scan", (p, theta, phi, ur, ui, gate), h2, vjp), h1


# -------------------------------------------------------------------- params
@dataclass
class WaveParams:
    """All tensors one layer's wave branch reads."""

    conv: Tensor  # (d, k_c)
    W_r: Tensor  # (d, D)
    W_i: Tensor  # (d, D)
    rotation: GivensRotationSet  # projection = W_theta
    givensh: GivensRotationSet  # projection = W_givensh
    gate: Tensor  # (D,) gate logits
    schedule: MeasurementSchedule

    @property
    def dim(self) -> int:
        return self.W_r.shape[1]

    @classmethod
    def init(cls, d_in: int, dim: int, rng: np.random.Generator, kernel: int = 4,
             eps: float = 0.01, horizon: int = 64, n_pairs: int | None = None) -> "WaveParams":
        std = 1.0 / np.sqrt(d_in)
        G = dim // 2 if n_pairs is None else n_pairs
        conv = np.zeros((d_in, kernel))
        conv[:, -1] = 1.0
        conv += rng.normal(0.0, 0.1, conv.shape)
        t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        return cls(
            conv=t(conv),
            W_r=t(rng.normal(0.0, std, (d_in, dim))),
            W_i=t(rng.normal(0.0, std, (d_in, dim))),
            rotation=GivensRotationSet.adjacent(dim, G, t(np.zeros((d_in, G)))),
            givensh=GivensRotationSet.adjacent(dim, G, t(np.zeros((d_in, G)))),
            gate=t(np.zeros(dim)),
            schedule=MeasurementSchedule(t(rng.normal(0.0, std, d_in)), t(np.zeros(2)),
                                         t(np.zeros(())), eps, horizon),
        )


@dataclass
class WaveState:
    """Decode-time wave memory: two complex vectors and the conv history."""

    h1: np.ndarray  # (B, D) complex
    h2: np.ndarray  # (B, D) complex
    conv_hist: np.ndarray  # (B, k-1, d)
    position: int = 0

    @classmethod
    def zeros(cls, batch: int, d_in: int, dim: int, kernel: int) -> "WaveState":
        return cls(np.zeros((batch, dim), np.complex128), np.zeros((batch, dim), np.complex128),
                   np.zeros((batch, kernel - 1, d_in)), 0)

    def buffers(self) -> list[np.ndarray]:
        return [self.h1, self.h2, self.conv_hist]

    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.buffers())


@dataclass
class WaveOutput:
    h: Tensor  # pass-2 states (B,T,D) complex
    h1: np.ndarray  # pass-1 states
    s_eff: Tensor  # (B,T)
    p: Tensor  # (B,T)
    state: WaveState
    c: Tensor  # (B,T,d) convolved input features


def wave_forward(params: WaveParams, x: Tensor, state: WaveState | None = None) -> WaveOutput:
    """Run the wave branch over ``x`` (B,T,d), optionally continuing ``state``."""
    B, T, d = x.shape
    k = params.conv.shape[1]
    if state is None:
        state = WaveState.zeros(B, d, params.dim, k)
    positions = state.position + np.arange(T)
    c = causal_conv(x, params.conv, state.conv_hist)
    s_eff, p = schedule_forward(params.schedule, c, positions)
    ur = ops.matmul(c, params.W_r)
    ui = ops.matmul(c, params.W_i)
    theta = ops.matmul(c, params.rotation.projection)
    phi = ops.matmul(c, params.givensh.projection)
    g = ops.sigmoid(params.gate)
    h, h1 = wave_scan(p, theta, phi, ur, ui, g, params.rotation, params.givensh, state.h1, state.h2)
    hist = np.concatenate([state.conv_hist, x.data], axis=1)[:, T:]
    new_state = WaveState(h1[:, -1].copy(), h.data[:, -1].copy(), np.ascontiguousarray(hist),
                          state.position + T)
    return WaveOutput(h, h1, s_eff, p, new_state, c)


# ------------------------------------------------------- single-sequence API
def _features(params: WaveParams, c_t) -> dict:
    c = np.asarray(c_t, dtype=np.float64)
    return {
        "ur": c @ params.W_r.data,
        "ui": c @ params.W_i.data,
        "theta": c @ params.rotation.projection.data,
        "phi": c @ params.givensh.projection.data,
    }


def fan_step(h_prev, c_t, t: int, params: WaveParams, inject=None) -> np.ndarray:
    """One Fan update from convolved features ``c_t``.

    ``inject`` overrides the complex injection ``W_r c + i W_i c``.
    """
    f = _features(params, c_t)
    _, p = measurement_probability(t, c_t, params.schedule)
    h_prev = np.asarray(h_prev, dtype=np.complex128)
    if is_checked() and not (np.all(np.isfinite(h_prev)) and np.all(np.isfinite(c_t))):
        raise NumericError(f"non-finite operand in fan_step at position t={t}")
    u = f["ur"] + 1j * f["ui"] if inject is None else inject
    return (1.0 - p) * apply_givens(params.rotation, f["theta"], h_prev) + p * u


def born_two_pass_scan(x, params: WaveParams) -> tuple[np.ndarray, np.ndarray]:
    """Pass-1 and pass-2 states for one sequence ``x`` (T,d) of wave inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("born_two_pass_scan expects a non-empty (T, d) sequence")
    with no_grad():
        out = wave_forward(params, Tensor(x[None]))
    return out.h1[0], out.h.data[0]


def decode_step(state: WaveState, x_t, params: WaveParams) -> tuple[WaveState, np.ndarray]:
    """Advance ``state`` by one raw input vector; returns the pass-2 state."""
    x = np.asarray(x_t, dtype=np.float64).reshape(state.h1.shape[0], 1, -1)
    with no_grad():
        out = wave_forward(params, Tensor(x), state)
    return out.state, out.h.data[:, 0]
