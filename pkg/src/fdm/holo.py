"""Reference-beam decoding of the complex wave state.

``h_decoded = h * mean_i(1 + tanh(W_i x))`` with one real (D, d) matrix per
head.  Zero-initialised heads give a factor of exactly 1, so attaching a fresh
beam leaves a model's outputs unchanged bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops


@dataclass
class ReferenceBeam:
    weight: Tensor  # (H, D, d_in)
    lam: float = 0.01
    layer: int = 0

    @classmethod
    def zeros(cls, heads: int, dim: int, d_in: int, lam: float = 0.01, layer: int = 0) -> "ReferenceBeam":
        if heads < 1:
            raise ValueError("a reference beam needs at least one head")
        return cls(Tensor(np.zeros((heads, dim, d_in)), requires_grad=True), lam, layer)

    @property
    def heads(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def n_params(self) -> int:
        return self.weight.size


def modulation_factor(x: Tensor, beam: ReferenceBeam) -> Tensor:
    """Per-channel real factor in (0, 2), shape ``x.shape[:-1] + (D,)``."""
    if x.ndim == 1:
        return ops.reshape(modulation_factor(ops.reshape(x, (1, x.shape[0])), beam), (beam.dim,))
    total = None
    for i in range(beam.heads):
        w_t = ops.transpose(beam.weight[i])  # (d_in, D)
        term = 1.0 + ops.tanh(ops.matmul(x, w_t))
        total = term if total is None else total + term
    return total / float(beam.heads)


def modulate(h: Tensor, x: Tensor, beam: ReferenceBeam) -> Tensor:
    if h.shape[-1] != beam.dim:
        raise ValueError(f"beam dimension {beam.dim} does not match state {h.shape}")
    return h * modulation_factor(x, beam)


def cross_gram(beam: ReferenceBeam) -> float:
    """Sum over ordered head pairs i != j of ||W_i W_j^T||_F^2 (no lambda)."""
    w = beam.weight.data
    total = 0.0
    for i in range(beam.heads):
        for j in range(beam.heads):
            if i != j:
                total += float(np.sum((w[i] @ w[j].T) ** 2))
    return total


def orthogonality_loss(beam: ReferenceBeam) -> Tensor:
    if beam.heads == 1:
        return Tensor(0.0)
    total = None
    for i in range(beam.heads):
        for j in range(beam.heads):
            if i == j:
                continue
            m = ops.matmul(beam.weight[i], ops.transpose(beam.weight[j]))
            term = ops.sum(m * m)
            total = term if total is None else total + term
    return total * beam.lam


# ------------------------------------------------------- layer-wise training
@dataclass
class LayerDelta:
    layer: int
    loss_before: float
    loss_after: float

    @property
    def delta_loss(self) -> float:
        return self.loss_after - self.loss_before

    @property
    def delta_ppl(self) -> float:
        return float(np.exp(self.loss_after) - np.exp(self.loss_before))


REPORT_FIELDS = ("layer", "loss_before", "loss_after", "delta_loss", "delta_ppl")


def write_layer_report(path, rows: list[LayerDelta]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([r.layer, f"{r.loss_before:.6f}", f"{r.loss_after:.6f}",
                        f"{r.delta_loss:.6f}", f"{r.delta_ppl:.6f}"])


def layer_deltas(model, beams: dict[int, ReferenceBeam], val_x, val_y) -> list[LayerDelta]:
    """Validation-loss change from switching on each beam in layer order.

    Beam ``l`` is measured with the beams of all earlier layers already on,
    which is how a sequentially trained stack accumulates.
    """
    from .train.freeze_scan import evaluate_loss

    saved = dict(model.beams)
    rows = []
    try:
        model.beams = {}
        before = evaluate_loss(model, val_x, val_y)
        for l in sorted(beams):
            model.beams[l] = beams[l]
            after = evaluate_loss(model, val_x, val_y)
            rows.append(LayerDelta(l, before, after))
            before = after
    finally:
        model.beams = saved
    return rows


def train_layerwise_sequential(model, corpus, layers, steps_per_layer: int, heads: int = 1, lam: float = 0.01,
                               lr: float = 3e-3, batch_size: int = 16, seq_len: int = 128,
                               eval_windows: int = 32, seed: int = 0) -> list[LayerDelta]:
    """Train one fresh beam per layer, in the given order, on a frozen model.

    Each beam is trained on the whole-model next-token loss (plus its
    orthogonality penalty) with every earlier beam already frozen; the
    returned rows give the validation-loss change each beam contributed.
    """
    from .autodiff import Tape, backward
    from .train.corpus import fixed_windows, sample_windows
    from .train.freeze_scan import evaluate_loss
    from .train.optim import AdamW

    layers = list(layers)
    for l in layers:
        if not 0 <= l < model.cfg.n_layers:
            raise IndexError(f"layer {l} out of range [0, {model.cfg.n_layers})")
    if len(set(layers)) != len(layers):
        raise ValueError("each layer can carry only one beam")
    rng = np.random.default_rng(seed)
    val_x, val_y = fixed_windows(corpus.val, eval_windows, seq_len, seed=seed + 10_000)
    model.set_trainable(None, False)
    rows = []
    for l in layers:
        before = evaluate_loss(model, val_x, val_y)
        earlier = {k: b.weight.data.copy() for k, b in model.beams.items()}
        beam = model.attach_beam(l, heads, lam)
        opt = AdamW(lr=lr, weight_decay=0.0)
        for _ in range(steps_per_layer):
            x, y = sample_windows(corpus.train, batch_size, seq_len, rng)
            model.zero_grad()
            with Tape() as tape:
                loss = model.loss(x, y) + orthogonality_loss(beam)
                backward(loss, tape)
            opt.step([(f"beams.{l}.W_ref", beam.weight)])
        beam.weight.requires_grad = False
        for k, w in earlier.items():
            if not np.array_equal(model.beams[k].weight.data, w):
                raise RuntimeError(f"beam of layer {k} changed while training layer {l}")
        rows.append(LayerDelta(l, before, evaluate_loss(model, val_x, val_y)))
    return rows
