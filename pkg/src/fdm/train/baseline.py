"""Small causal-attention Transformer used only as an MQAR reference point."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from ..model import rms_norm


class AttentionBaseline:
    """Learned positions, ``n_layers`` x (single-head attention + FFN)."""

    def __init__(self, d_model: int = 64, n_layers: int = 2, vocab_size: int = 64, max_len: int = 64,
                 ffn_mult: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = d_model
        self.d, self.max_len = d, max_len
        self.vocab_size = vocab_size
        t = lambda a, n: Tensor(a, requires_grad=True, name=n)  # noqa: E731
        P = {"embed": t(rng.normal(0, 1.0, (vocab_size, d)), "embed"),
             "pos": t(rng.normal(0, 1.0, (max_len, d)), "pos")}
        for l in range(n_layers):
            p = f"layers.{l}."
            for name, shape, std in (("norm_attn.g", (d,), None), ("W_q", (d, d), 1 / np.sqrt(d)),
                                     ("W_k", (d, d), 1 / np.sqrt(d)), ("W_v", (d, d), 1 / np.sqrt(d)),
                                     ("W_o", (d, d), 0.5 / np.sqrt(d)), ("norm_ffn.g", (d,), None),
                                     ("W1", (d, ffn_mult * d), 1 / np.sqrt(d)),
                                     ("W2", (ffn_mult * d, d), 0.5 / np.sqrt(ffn_mult * d))):
                val = np.ones(shape) if std is None else rng.normal(0, std, shape)
                P[p + name] = t(val, p + name)
        P["norm_out.g"] = t(np.ones(d), "norm_out.g")
        P["lm_head"] = t(rng.normal(0, 0.02 / np.sqrt(d), (d, vocab_size)), "lm_head")
        self.params = P
        self.n_layers = n_layers

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        T = tokens.shape[1]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.max_len}")
        P = self.params
        x = ops.gather(P["embed"], tokens) + P["pos"][:T]
        mask = np.tril(np.ones((T, T), dtype=bool))
        for l in range(self.n_layers):
            p = f"layers.{l}."
            u = rms_norm(x, P[p + "norm_attn.g"])
            q, k, v = (ops.matmul(u, P[p + n]) for n in ("W_q", "W_k", "W_v"))
            att = ops.masked_softmax(ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d)), mask)
            x = x + ops.matmul(ops.matmul(att, v), P[p + "W_o"])
            hidden = ops.silu(ops.matmul(rms_norm(x, P[p + "norm_ffn.g"]), P[p + "W1"]))
            x = x + ops.matmul(hidden, P[p + "W2"])
        logits = ops.matmul(rms_norm(x, P["norm_out.g"]), P["lm_head"])
        return logits[0] if single else logits

    __call__ = forward

    def loss(self, tokens, targets, weights=None) -> Tensor:
        return ops.cross_entropy(self.forward(tokens), targets, weights)
