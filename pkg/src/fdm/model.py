"""The stacked FDM language model and its wave/cache parameter partition.

Layer ``l`` with residual input ``x``::

    c    = CausalConv(RMSNorm_w(x))
    h    = WaveScan(c)                       complex (B,T,D), optionally beam-modulated
    y    = x + [Re h; Im h] @ bridge + CacheAttend(RMSNorm_c(c), s_eff)
    out  = y + FFN(RMSNorm_f(y))

The cache ranks tokens by the same layer's ``s_eff`` and reads the convolved
features, so each slot's key already mixes in the few preceding tokens.  With
``cache_source = "input"`` it reads ``RMSNorm_c(x)`` instead.  Embeddings and the
output head are untied.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Tensor, load_checkpoint, no_grad, ops, save_checkpoint
from .cache import CacheConfig, CacheProjections, CacheState, cache_attend, cache_attend_dense, cache_update, state_from_sequence
from .holo import ReferenceBeam, modulate
from .wave import GivensRotationSet, MeasurementSchedule, WaveParams, WaveState, wave_forward

WAVE_PARAMS = ("conv", "W_r", "W_i", "W_theta", "W_beta", "W_givensh", "gate")

_WAVE_RE = re.compile(r"^layers\.\d+\.wave\.(%s)$" % "|".join(WAVE_PARAMS))
_CACHE_RE = re.compile(
    r"^(embed|lm_head|norm_out\.g"
    r"|layers\.\d+\.(norm_wave\.g|norm_cache\.g|norm_ffn\.g|sched\.mu|sched\.W_pos|bridge"
    r"|cache\.W_q|cache\.W_k|cache\.W_v|cache\.W_o|ffn\.W1|ffn\.W2)"
    r"|beams\.\d+\.W_ref)$"
)


CACHE_SOURCES = ("conv", "input")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    vocab_size: int = 258
    W: int = 8
    K: int = 4
    n_G: int | None = None
    k_c: int = 4
    T: int = 128
    eps: float = 0.01
    ffn_mult: int = 4
    seed: int = 0
    d_state: int | None = None
    d_cache: int | None = None
    score_bias: bool = True
    cache_source: str = "conv"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "vocab_size", "W", "k_c", "T", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.cache_source not in CACHE_SOURCES:
            raise ValueError(f"cache_source must be one of {CACHE_SOURCES}, got {self.cache_source!r}")
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if 2 * self.G > self.D:
            raise ValueError(f"n_G={self.G} disjoint pairs do not fit in D={self.D}")

    @property
    def D(self) -> int:
        return self.d_state or self.d_model

    @property
    def G(self) -> int:
        return self.n_G if self.n_G is not None else self.D // 2

    @property
    def dc(self) -> int:
        return self.d_cache or self.d_model

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}


PRESETS = {
    "desk-tiny": ModelConfig(),
    "mqar-tiny": ModelConfig(vocab_size=64, W=8, K=16, T=64),
    "paper-137m": ModelConfig(d_model=576, n_layers=12, vocab_size=50257, W=256, K=16, T=1024,
                              d_state=720, d_cache=768),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        return PRESETS[name].replace(**overrides)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, D, G, V = cfg.d_model, cfg.D, cfg.G, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "norm_wave.g": (d,),
            p + "wave.conv": (d, cfg.k_c),
            p + "wave.W_r": (d, D),
            p + "wave.W_i": (d, D),
            p + "wave.W_theta": (d, G),
            p + "wave.W_beta": (d,),
            p + "wave.W_givensh": (d, G),
            p + "wave.gate": (D,),
            p + "sched.mu": (),
            p + "sched.W_pos": (2,),
            p + "bridge": (2 * D, d),
            p + "norm_cache.g": (d,),
            p + "cache.W_q": (d, cfg.dc),
            p + "cache.W_k": (d, cfg.dc),
            p + "cache.W_v": (d, cfg.dc),
            p + "cache.W_o": (cfg.dc, d),
            p + "norm_ffn.g": (d,),
            p + "ffn.W1": (d, cfg.ffn_mult * d),
            p + "ffn.W2": (cfg.ffn_mult * d, d),
        })
    shapes["norm_out.g"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


def tag_of(name: str) -> str:
    if _WAVE_RE.match(name):
        return "wave"
    if _CACHE_RE.match(name):
        return "cache"
    raise KeyError(f"parameter {name!r} is not covered by the wave/cache partition")


@dataclass
class ParameterPartition:
    tags: dict[str, str]
    sizes: dict[str, int]

    def names(self, tag: str) -> list[str]:
        return [n for n, t in self.tags.items() if t == tag]

    def count(self, tag: str = "all") -> int:
        if tag == "all":
            return sum(self.sizes.values())
        return sum(self.sizes[n] for n in self.names(tag))


def partition_shapes(shapes: dict[str, tuple[int, ...]]) -> ParameterPartition:
    tags = {n: tag_of(n) for n in shapes}
    sizes = {n: int(np.prod(s, dtype=np.int64)) for n, s in shapes.items()}
    return ParameterPartition(tags, sizes)


def _init_value(name: str, shape, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    d = cfg.d_model
    leaf = name.split(".", 2)[-1] if name.startswith("layers.") else name
    if name == "embed":
        return rng.normal(0.0, 1.0, shape)
    if name == "lm_head":
        return rng.normal(0.0, 0.02 / np.sqrt(d), shape)
    if leaf.endswith(".g"):
        return np.ones(shape)
    if leaf == "wave.conv":
        w = rng.normal(0.0, 0.1, shape)
        w[:, -1] += 1.0
        return w
    if leaf in ("wave.W_theta", "wave.W_givensh", "wave.gate", "sched.mu", "sched.W_pos"):
        return np.zeros(shape)
    if leaf == "bridge":
        return rng.normal(0.0, 0.5 / np.sqrt(shape[0]), shape)
    if leaf in ("cache.W_o", "ffn.W2"):
        return rng.normal(0.0, 0.5 / np.sqrt(shape[0]), shape)
    # W_r, W_i, W_beta, W_q, W_k, W_v, W1
    return rng.normal(0.0, 1.0 / np.sqrt(d), shape)


def rms_norm(x: Tensor, g: Tensor, eps: float = 1e-6) -> Tensor:
    ms = ops.mean(x * x, axis=-1, keepdims=True)
    r = ops.power(ms + eps, -0.5)
    return x * ops.expand(r, x.shape) * g


@dataclass
class LayerView:
    wave: WaveParams
    cache: CacheProjections
    cache_cfg: CacheConfig
    norm_wave: Tensor
    norm_cache: Tensor
    norm_ffn: Tensor
    bridge: Tensor
    W1: Tensor
    W2: Tensor


@dataclass
class LayerState:
    wave: WaveState
    cache: CacheState

    def buffers(self) -> list[np.ndarray]:
        return self.wave.buffers() + self.cache.buffers()


@dataclass
class DecodeState:
    """Everything the model keeps between decode steps."""

    layers: list[LayerState]
    position: int = 0

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers()]

    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.buffers())

    def slot_counts(self) -> list[int]:
        return [layer.cache.slot_count for layer in self.layers]


@dataclass
class ForwardTrace:
    """Per-layer internals exposed for analysis (complex states, scores)."""

    h: list[np.ndarray] = field(default_factory=list)
    s_eff: list[np.ndarray] = field(default_factory=list)
    p: list[np.ndarray] = field(default_factory=list)
    layer_inputs: list[np.ndarray] = field(default_factory=list)


class FDM:
    """Embeddings, ``n_layers`` wave+cache+FFN layers, and an untied head."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        for name, shape in parameter_shapes(cfg).items():
            value = _init_value(name, shape, cfg, rng)
            if params is not None:
                value = np.array(params[name], dtype=np.float64).reshape(shape)
            self.params[name] = Tensor(value, requires_grad=True, name=name)
        self.beams: dict[int, ReferenceBeam] = {}
        self._build_views()

    def _build_views(self) -> None:
        cfg, P = self.cfg, self.params
        self.layers: list[LayerView] = []
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            wave = WaveParams(
                conv=P[p + "wave.conv"], W_r=P[p + "wave.W_r"], W_i=P[p + "wave.W_i"],
                rotation=GivensRotationSet.adjacent(cfg.D, cfg.G, P[p + "wave.W_theta"]),
                givensh=GivensRotationSet.adjacent(cfg.D, cfg.G, P[p + "wave.W_givensh"]),
                gate=P[p + "wave.gate"],
                schedule=MeasurementSchedule(P[p + "wave.W_beta"], P[p + "sched.W_pos"], P[p + "sched.mu"],
                                             cfg.eps, cfg.T),
            )
            cache = CacheProjections(P[p + "cache.W_q"], P[p + "cache.W_k"], P[p + "cache.W_v"], P[p + "cache.W_o"])
            self.layers.append(LayerView(
                wave, cache, CacheConfig(cfg.W, cfg.K, cfg.dc, cfg.dc, cfg.score_bias),
                P[p + "norm_wave.g"], P[p + "norm_cache.g"], P[p + "norm_ffn.g"], P[p + "bridge"],
                P[p + "ffn.W1"], P[p + "ffn.W2"]))

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.params.items())
        for l, beam in sorted(self.beams.items()):
            out.append((f"beams.{l}.W_ref", beam.weight))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def partition(self) -> ParameterPartition:
        return partition_parameters(self)

    def set_trainable(self, tag: str | None = None, trainable: bool = True, names: Iterable[str] | None = None) -> None:
        """Toggle ``requires_grad`` for a partition set or an explicit name list."""
        for n, t in self.named_parameters():
            if (names is not None and n in names) or (names is None and (tag is None or tag_of(n) == tag)):
                t.requires_grad = trainable
                if not trainable:
                    t.grad = None

    def freeze(self, tag: str) -> None:
        self.set_trainable(tag, False)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def attach_beam(self, layer: int, heads: int = 1, lam: float = 0.01) -> ReferenceBeam:
        if not 0 <= layer < self.cfg.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.cfg.n_layers})")
        beam = ReferenceBeam.zeros(heads, self.cfg.D, self.cfg.d_model, lam, layer)
        self.beams[layer] = beam
        return beam

    def detach_beams(self) -> None:
        self.beams.clear()

    # ----------------------------------------------------------- persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {t.shape}")
            t.data[...] = state[n]
        self.beams = {}
        for n, v in state.items():
            m = re.match(r"^beams\.(\d+)\.W_ref$", n)
            if m:
                self.beams[int(m.group(1))] = ReferenceBeam(Tensor(v.copy(), requires_grad=True), layer=int(m.group(1)))

    def save(self, path, meta: dict | None = None) -> None:
        state = self.state_dict()
        save_checkpoint(path, state, {n: tag_of(n) for n in state},
                        {"config": asdict(self.cfg), **(meta or {})})

    @classmethod
    def load(cls, path) -> "FDM":
        tensors, _, meta = load_checkpoint(path)
        model = cls(ModelConfig(**meta["config"]), {n: v for n, v in tensors.items() if not n.startswith("beams.")})
        model.load_state_dict(tensors)
        return model

    # --------------------------------------------------------------- forward
    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.dtype.kind not in "iu":
            raise TypeError("token ids must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        return tokens.astype(np.int64)

    def _ffn(self, lv: LayerView, y: Tensor) -> Tensor:
        hidden = ops.silu(ops.matmul(rms_norm(y, lv.norm_ffn), lv.W1))
        return y + ops.matmul(hidden, lv.W2)

    def _wave_branch(self, l: int, lv: LayerView, x: Tensor, state: WaveState | None):
        out = wave_forward(lv.wave, rms_norm(x, lv.norm_wave), state)
        h = out.h
        if l in self.beams:
            h = modulate(h, x, self.beams[l])
        wave_out = ops.matmul(ops.concat([ops.real(h), ops.imag(h)], axis=-1), lv.bridge)
        return wave_out, out, h

    def _cache_input(self, lv: LayerView, x: Tensor, wout) -> Tensor:
        return rms_norm(wout.c if self.cfg.cache_source == "conv" else x, lv.norm_cache)

    def forward(self, tokens, trace: ForwardTrace | None = None) -> Tensor:
        """Logits (B,T,V) for token ids (B,T) or (T,) (then (T,V))."""
        tokens = self._check_tokens(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        x = ops.gather(self.params["embed"], tokens)
        for l, lv in enumerate(self.layers):
            if trace is not None:
                trace.layer_inputs.append(x.data)
            wave_out, wout, h = self._wave_branch(l, lv, x, None)
            cache_out = cache_attend_dense(self._cache_input(lv, x, wout), wout.s_eff, lv.cache, lv.cache_cfg)
            x = self._ffn(lv, x + wave_out + cache_out)
            if trace is not None:
                trace.h.append(h.data)
                trace.s_eff.append(wout.s_eff.data)
                trace.p.append(wout.p.data)
        logits = ops.matmul(rms_norm(x, self.params["norm_out.g"]), self.params["lm_head"])
        return logits[0] if single else logits

    __call__ = forward

    def loss(self, tokens, targets, weights=None) -> Tensor:
        return ops.cross_entropy(self.forward(tokens), targets, weights)

    # ---------------------------------------------------------------- decode
    def new_state(self) -> DecodeState:
        cfg = self.cfg
        return DecodeState([LayerState(WaveState.zeros(1, cfg.d_model, cfg.D, cfg.k_c), CacheState(lv.cache_cfg))
                            for lv in self.layers])

    def prefill(self, tokens) -> tuple[np.ndarray, DecodeState]:
        """Batch-process a prompt (T,) and return its logits and decode state."""
        tokens = self._check_tokens(tokens)
        if tokens.ndim != 1 or len(tokens) == 0:
            raise ValueError("prefill takes a non-empty 1-D prompt")
        states = []
        with no_grad():
            x = ops.gather(self.params["embed"], tokens[None])
            for l, lv in enumerate(self.layers):
                wave_out, wout, _ = self._wave_branch(l, lv, x, None)
                xc = self._cache_input(lv, x, wout)
                cache_out = cache_attend_dense(xc, wout.s_eff.data, lv.cache, lv.cache_cfg)
                xs = xc.data[0]
                cstate = state_from_sequence(xs @ lv.cache.W_k.data, xs @ lv.cache.W_v.data,
                                             wout.s_eff.data[0], lv.cache_cfg)
                states.append(LayerState(wout.state, cstate))
                x = self._ffn(lv, x + wave_out + cache_out)
            logits = ops.matmul(rms_norm(x, self.params["norm_out.g"]), self.params["lm_head"])
        return logits.data[0], DecodeState(states, len(tokens))

    def decode_step(self, state: DecodeState, token: int) -> np.ndarray:
        """Consume one token, mutate ``state`` in place, return next-token logits (V,)."""
        tok = self._check_tokens(np.array([[token]]))
        pos = state.position
        with no_grad():
            x = ops.gather(self.params["embed"], tok)
            for l, lv in enumerate(self.layers):
                ls = state.layers[l]
                wave_out, wout, _ = self._wave_branch(l, lv, x, ls.wave)
                ls.wave = wout.state
                xc = self._cache_input(lv, x, wout).data[0, 0]
                cache_vec = cache_attend(xc, ls.cache, lv.cache)
                cache_update(ls.cache, xc, pos, float(wout.s_eff.data[0, 0]), lv.cache)
                x = self._ffn(lv, x + wave_out + Tensor(cache_vec[None, None]))
            logits = ops.matmul(rms_norm(x, self.params["norm_out.g"]), self.params["lm_head"])
        state.position = pos + 1
        return logits.data[0, 0]


def partition_parameters(model) -> ParameterPartition:
    """Wave/cache tags for a model (or a config, without allocating weights)."""
    if isinstance(model, ModelConfig):
        return partition_shapes(parameter_shapes(model))
    return partition_shapes({n: t.shape for n, t in model.named_parameters()})


def count_parameters(model, which: str = "all") -> int:
    if which not in ("wave", "cache", "all"):
        raise ValueError(f"unknown parameter set {which!r}")
    return partition_parameters(model).count(which)


def census_bytes(obj, _seen=None) -> int:
    """Independent byte count of every numpy array reachable from ``obj``."""
    seen = _seen if _seen is not None else set()
    if id(obj) in seen:
        return 0
    seen.add(id(obj))
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (list, tuple)):
        return sum(census_bytes(o, seen) for o in obj)
    if isinstance(obj, dict):
        return sum(census_bytes(o, seen) for o in obj.values())
    if hasattr(obj, "__dict__"):
        return sum(census_bytes(o, seen) for o in vars(obj).values())
    return 0


def load_config_file(path) -> ModelConfig:
    """Read a ``key = value`` file (``preset = name`` allowed) into a ModelConfig."""
    from .config import read_config

    return read_config(Path(path)).model
