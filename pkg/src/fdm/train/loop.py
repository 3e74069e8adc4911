"""The basic optimization step, serial or over parallel micro-batches."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from ..autodiff import Tape, Tensor, backward
from .optim import AdamW


def train_step(model, opt: AdamW, loss_fn: Callable[[], Tensor], lr: float | None = None) -> float:
    """One forward/backward/update; returns the loss value."""
    model.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        backward(loss, tape)
    opt.step(model.named_parameters(), lr)
    return float(loss.data)


def _micro_grads(model, loss_fn, chunk) -> tuple[float, dict[int, np.ndarray]]:
    sink: dict[int, np.ndarray] = {}
    with Tape() as tape:
        loss = loss_fn(chunk)
        backward(loss, tape, sink=sink)
    return float(loss.data), sink


def accumulate_grads(model, loss_fn: Callable[[object], Tensor], chunks: Sequence, workers: int = 1) -> float:
    """Sum gradients of ``loss_fn(chunk)`` over ``chunks`` into ``.grad``.

    With ``workers > 1`` the micro-batches run in threads, each on its own
    tape and gradient sink; sinks are then reduced in chunk order so the
    result does not depend on scheduling.  Returns the summed loss.
    """
    model.zero_grad()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda c: _micro_grads(model, loss_fn, c), chunks))
    else:
        results = [_micro_grads(model, loss_fn, c) for c in chunks]
    total = 0.0
    for _, t in model.named_parameters():
        for _, sink in results:
            g = sink.get(id(t))
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
    for loss, _ in results:
        total += loss
    return total
