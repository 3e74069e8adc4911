"""Particle component: attention over W recent tokens plus K top-s_eff tokens.

Query position ``i`` may read key position ``j`` iff

* ``max(0, i-W) <= j < i`` (local window), or
* ``j`` is among the K largest ``s_eff(k)`` for ``k < i`` (global slots).

Ranking ties go to the smaller position.  Attention is single-head scaled
dot-product restricted to the readable positions; a query with nothing to
read returns zeros.

Two implementations share these semantics: a dense (B,T,T)-masked path used
for training and prefill, and a streaming :class:`CacheState` holding at most
W + K slots for decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, ops


@dataclass(frozen=True)
class CacheConfig:
    W: int
    K: int
    d_k: int
    d_v: int
    score_bias: bool = False  # add s_eff to the logits of slots reachable only as global

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("local window W must be >= 1")
        if self.K < 0:
            raise ValueError("global slot count K must be >= 0")

    @property
    def slots(self) -> int:
        return self.W + self.K


@dataclass
class CacheProjections:
    W_q: Tensor  # (d, d_k)
    W_k: Tensor  # (d, d_k)
    W_v: Tensor  # (d, d_v)
    W_o: Tensor  # (d_v, d)

    @classmethod
    def init(cls, d: int, d_k: int, d_v: int, rng: np.random.Generator, out_scale: float = 1.0):
        t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        s = 1.0 / np.sqrt(d)
        return cls(t(rng.normal(0, s, (d, d_k))), t(rng.normal(0, s, (d, d_k))),
                   t(rng.normal(0, s, (d, d_v))), t(rng.normal(0, out_scale / np.sqrt(d_v), (d_v, d))))


# ---------------------------------------------------------------------- masks
def _beats(scores: np.ndarray, k: int, j: int) -> bool:
    return scores[k] > scores[j] or (scores[k] == scores[j] and k < j)


def cache_mask(i: int, j: int, scores, cfg: CacheConfig) -> bool:
    """Whether query ``i`` may read position ``j`` given the s_eff history."""
    if j > i:
        raise ValueError(f"future access: key position {j} > query position {i}")
    if j < 0:
        raise ValueError("negative key position")
    if j == i:
        return False
    if max(0, i - cfg.W) <= j:
        return True
    scores = np.asarray(scores, dtype=np.float64)
    rank = sum(_beats(scores, k, j) for k in range(i))
    return rank < cfg.K


def dense_masks(scores: np.ndarray, W: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """(local, global-only) boolean masks of shape (…,T,T); row = query, column = key."""
    s = np.asarray(scores, dtype=np.float64)
    T = s.shape[-1]
    idx = np.arange(T)
    causal = idx[None, :] < idx[:, None]
    local = np.broadcast_to(causal & (idx[None, :] >= idx[:, None] - W), s.shape[:-1] + (T, T))
    if K == 0:
        return local.copy(), np.zeros(local.shape, dtype=bool)
    sk = s[..., :, None]
    sj = s[..., None, :]
    # beats[k, j]: k outranks j
    beats = (sk > sj) | ((sk == sj) & (idx[:, None] < idx[None, :]))
    rank = np.cumsum(beats, axis=-2, dtype=np.int64)
    rank = np.concatenate([np.zeros_like(rank[..., :1, :]), rank[..., :-1, :]], axis=-2)
    return local.copy(), causal & (rank < K) & ~local


def dense_mask(scores: np.ndarray, W: int, K: int) -> np.ndarray:
    """(…,T,T) boolean mask, row = query, column = key."""
    local, glob = dense_masks(scores, W, K)
    return local | glob


def offline_topk(scores, K: int, upto: int | None = None) -> list[int]:
    """Positions of the K best scores among ``scores[:upto]`` (ties: smaller position)."""
    s = np.asarray(scores, dtype=np.float64)[:upto]
    order = sorted(range(len(s)), key=lambda k: (-s[k], k))
    return sorted(order[:K])


# ------------------------------------------------------------------- training
def cache_attend_dense(x: Tensor, scores, proj: CacheProjections, cfg: CacheConfig) -> Tensor:
    """Cache branch for a whole batch ``x`` (B,T,d) under the dense mask.

    ``scores`` (B,T) may be a Tensor; with ``cfg.score_bias`` its gradient
    then flows through the logits of global-only slots.
    """
    score_t = scores if isinstance(scores, Tensor) else Tensor(scores)
    local, glob = dense_masks(score_t.data, cfg.W, cfg.K)
    q = ops.matmul(x, proj.W_q)
    k = ops.matmul(x, proj.W_k)
    v = ops.matmul(x, proj.W_v)
    logits = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(cfg.d_k))
    if cfg.score_bias and glob.any():
        B, T = score_t.shape
        bias = ops.expand(ops.reshape(score_t, (B, 1, T)), (B, T, T))
        logits = logits + bias * glob.astype(np.float64)
    att = ops.masked_softmax(logits, local | glob)
    return ops.matmul(ops.matmul(att, v), proj.W_o)


# -------------------------------------------------------------------- decoding
@dataclass
class CacheState:
    """Fixed-size slot store for one sequence.

    ``counters`` = [position, n_local, n_global].  All buffers are allocated
    once, so ``nbytes()`` depends on the configuration only.
    """

    cfg: CacheConfig
    local_k: np.ndarray = field(init=False)
    local_v: np.ndarray = field(init=False)
    local_pos: np.ndarray = field(init=False)
    global_k: np.ndarray = field(init=False)
    global_v: np.ndarray = field(init=False)
    global_pos: np.ndarray = field(init=False)
    global_score: np.ndarray = field(init=False)
    counters: np.ndarray = field(init=False)

    def __post_init__(self):
        W, K = self.cfg.W, self.cfg.K
        self.local_k = np.zeros((W, self.cfg.d_k))
        self.local_v = np.zeros((W, self.cfg.d_v))
        self.local_pos = np.full(W, -1, dtype=np.int64)
        self.global_k = np.zeros((K, self.cfg.d_k))
        self.global_v = np.zeros((K, self.cfg.d_v))
        self.global_pos = np.full(K, -1, dtype=np.int64)
        self.global_score = np.full(K, -np.inf)
        self.counters = np.zeros(3, dtype=np.int64)

    @property
    def position(self) -> int:
        return int(self.counters[0])

    @property
    def n_local(self) -> int:
        return int(self.counters[1])

    @property
    def n_global(self) -> int:
        return int(self.counters[2])

    @property
    def slot_count(self) -> int:
        return self.n_local + self.n_global

    def buffers(self) -> list[np.ndarray]:
        return [self.local_k, self.local_v, self.local_pos, self.global_k, self.global_v,
                self.global_pos, self.global_score, self.counters]

    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.buffers())

    def local_positions(self) -> list[int]:
        return sorted(int(p) for p in self.local_pos[: self.n_local])

    def global_positions(self) -> list[int]:
        return sorted(int(p) for p in self.global_pos[: self.n_global])

    def readable(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Keys, values, positions and logit biases visible to the next query, each once."""
        i = self.position
        nl, ng = self.n_local, self.n_global
        lo = i - self.cfg.W
        gsel = self.global_pos[:ng] < lo
        keys = np.concatenate([self.local_k[:nl], self.global_k[:ng][gsel]])
        vals = np.concatenate([self.local_v[:nl], self.global_v[:ng][gsel]])
        pos = np.concatenate([self.local_pos[:nl], self.global_pos[:ng][gsel]])
        gbias = self.global_score[:ng][gsel] if self.cfg.score_bias else np.zeros(int(gsel.sum()))
        bias = np.concatenate([np.zeros(nl), gbias])
        return keys, vals, pos, bias


def _attend(q: np.ndarray, keys: np.ndarray, vals: np.ndarray, d_k: int, bias=None) -> np.ndarray:
    if len(keys) == 0:
        return np.zeros(vals.shape[-1])
    logits = keys @ q * (1.0 / np.sqrt(d_k))
    if bias is not None:
        logits = logits + bias
    e = np.exp(logits - logits.max())
    return (e / e.sum()) @ vals


def cache_attend(x_i, state: CacheState, proj: CacheProjections) -> np.ndarray:
    """Cache output for query vector ``x_i`` at ``state.position``."""
    x = np.asarray(x_i, dtype=np.float64)
    keys, vals, _, bias = state.readable()
    if len(keys) == 0:
        return np.zeros(proj.W_o.shape[1])
    ctx = _attend(x @ proj.W_q.data, keys, vals, state.cfg.d_k, bias)
    return ctx @ proj.W_o.data


def cache_update(state: CacheState, x_i, i: int, s_eff_i: float, proj: CacheProjections) -> CacheState:
    """Store token ``i`` in the ring and admit it to the global set if it ranks."""
    if i != state.position:
        raise ValueError(f"cache position mismatch: got {i}, expected {state.position}")
    x = np.asarray(x_i, dtype=np.float64)
    return _insert(state, x @ proj.W_k.data, x @ proj.W_v.data, float(s_eff_i))


def _insert(state: CacheState, k: np.ndarray, v: np.ndarray, score: float) -> CacheState:
    cfg = state.cfg
    i = state.position
    slot = i % cfg.W
    state.local_k[slot] = k
    state.local_v[slot] = v
    state.local_pos[slot] = i
    state.counters[1] = min(i + 1, cfg.W)
    if cfg.K:
        ng = state.n_global
        if ng < cfg.K:
            target = ng
            state.counters[2] = ng + 1
        else:
            # worst slot: lowest score, ties -> larger position
            sc, ps = state.global_score, state.global_pos
            target = min(range(cfg.K), key=lambda m: (sc[m], -ps[m]))
            if not score > sc[target]:
                target = -1
        if target >= 0:
            state.global_k[target] = k
            state.global_v[target] = v
            state.global_pos[target] = i
            state.global_score[target] = score
    state.counters[0] = i + 1
    return state


def prefill_cache(x, scores, proj: CacheProjections, cfg: CacheConfig) -> tuple[CacheState, np.ndarray]:
    """Run a (T,d) sequence through the dense path and build the decode state."""
    x = np.asarray(x, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    with no_grad():
        out = cache_attend_dense(Tensor(x[None]), scores[None], proj, cfg).data[0]
    return state_from_sequence(x @ proj.W_k.data, x @ proj.W_v.data, scores, cfg), out


def state_from_sequence(keys: np.ndarray, vals: np.ndarray, scores: np.ndarray, cfg: CacheConfig) -> CacheState:
    """CacheState equal to streaming ``len(scores)`` tokens through ``cache_update``."""
    state = CacheState(cfg)
    N = len(scores)
    start = max(0, N - cfg.W)
    for i in range(start, N):
        slot = i % cfg.W
        state.local_k[slot], state.local_v[slot], state.local_pos[slot] = keys[i], vals[i], i
    state.counters[:] = (N, min(N, cfg.W), 0)
    if cfg.K:
        top = offline_topk(scores, cfg.K)
        for m, j in enumerate(top):
            state.global_k[m], state.global_v[m] = keys[j], vals[j]
            state.global_pos[m], state.global_score[m] = j, scores[j]
        state.counters[2] = len(top)
    return state


def stream_cache(x, scores, proj: CacheProjections, cfg: CacheConfig) -> tuple[CacheState, np.ndarray]:
    """Token-by-token attend-then-update over a (T,d) sequence."""
    x = np.asarray(x, dtype=np.float64)
    state = CacheState(cfg)
    outs = []
    for i in range(len(x)):
        outs.append(cache_attend(x[i], state, proj))
        cache_update(state, x[i], i, scores[i], proj)
    return state, np.array(outs)
