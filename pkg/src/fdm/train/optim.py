"""AdamW with decoupled weight decay, global-norm clipping and a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import NumericError, is_checked


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    last_grad_norm: float = 0.0

    def step(self, named_params, lr: float | None = None) -> None:
        """Update every parameter that requires grad; others are not touched.

        Weight decay applies to matrices only (ndim >= 2).
        """
        lr = self.lr if lr is None else lr
        live = [(n, t) for n, t in named_params if t.requires_grad]
        grads = {}
        for n, t in live:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if is_checked() and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {n}")
            grads[n] = g
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        self.last_grad_norm = norm
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n, t in live:
            g = grads[n] * scale
            if n not in self.moments:
                self.moments[n] = (np.zeros_like(t.data), np.zeros_like(t.data))
            m, v = self.moments[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and t.ndim >= 2:
                t.data -= lr * self.weight_decay * t.data
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, base_lr: float, total: int, warmup: int = 200, min_ratio: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``min_ratio * base_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))
