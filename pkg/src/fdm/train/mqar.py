"""Multi-query associative recall task.

Sequence layout (vocabulary ``V``; 0 = filler, 1 = separator; keys and values
come from disjoint halves of ``[2, V)``)::

    k1 v1 k2 v2 ... kn vn SEP  0 0 q a 0 q a 0 0 ...

Each key is queried exactly once after the separator, at a position at least
``min_gap`` tokens past the end of the key-value block; the token following a
query is its answer.  The model is scored at query positions, where the
next-token target is the answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FILLER = 0
SEP = 1


@dataclass
class MqarInstance:
    tokens: np.ndarray  # (seq_len,)
    query_positions: np.ndarray  # (n_pairs,)
    answers: np.ndarray  # (n_pairs,)


@dataclass
class MqarBatch:
    tokens: np.ndarray  # (N, L)
    targets: np.ndarray  # (N, L) next-token ids
    weights: np.ndarray  # (N, L) 1.0 at query positions
    answers: np.ndarray  # (N, n_pairs)
    query_positions: np.ndarray  # (N, n_pairs)

    def __len__(self) -> int:
        return len(self.tokens)

    def instances(self) -> list[MqarInstance]:
        return [MqarInstance(t, q, a) for t, q, a in zip(self.tokens, self.query_positions, self.answers)]

    def subset(self, idx) -> "MqarBatch":
        return MqarBatch(self.tokens[idx], self.targets[idx], self.weights[idx], self.answers[idx],
                         self.query_positions[idx])


def vocab_ranges(vocab: int) -> tuple[range, range]:
    half = (vocab - 2) // 2
    return range(2, 2 + half), range(2 + half, 2 + 2 * half)


def generate_mqar(seed: int, seq_len: int = 64, n_pairs: int = 4, vocab: int = 64,
                  n_instances: int = 1000, min_gap: int = 8) -> MqarBatch:
    keys_r, vals_r = vocab_ranges(vocab)
    if n_pairs < 1:
        raise ValueError("need at least one key-value pair")
    if n_pairs > len(keys_r):
        raise ValueError(f"{n_pairs} unique keys do not fit in vocab {vocab}")
    qstart = 2 * n_pairs + 1 + min_gap
    free = seq_len - qstart
    if free < 2 * n_pairs:
        raise ValueError(f"seq_len={seq_len} too short for {n_pairs} pairs with gap {min_gap}")
    rng = np.random.default_rng(seed)
    toks = np.full((n_instances, seq_len), FILLER, dtype=np.int64)
    qpos = np.zeros((n_instances, n_pairs), dtype=np.int64)
    ans = np.zeros((n_instances, n_pairs), dtype=np.int64)
    for n in range(n_instances):
        keys = rng.choice(np.array(keys_r), n_pairs, replace=False)
        vals = rng.choice(np.array(vals_r), n_pairs, replace=True)
        toks[n, 0:2 * n_pairs:2] = keys
        toks[n, 1:2 * n_pairs:2] = vals
        toks[n, 2 * n_pairs] = SEP
        # choose n_pairs non-overlapping 2-token slots in the free region
        extra = free - 2 * n_pairs
        cuts = np.sort(rng.integers(0, extra + 1, n_pairs))
        starts = qstart + cuts + 2 * np.arange(n_pairs)
        order = rng.permutation(n_pairs)
        toks[n, starts] = keys[order]
        toks[n, starts + 1] = vals[order]
        qpos[n] = starts
        ans[n] = vals[order]
    targets = np.concatenate([toks[:, 1:], np.full((n_instances, 1), FILLER)], axis=1)
    weights = np.zeros(toks.shape)
    np.put_along_axis(weights, qpos, 1.0, axis=1)
    return MqarBatch(toks, targets, weights, ans, qpos)


def replay_answers(tokens: np.ndarray) -> tuple[list[int], list[int]]:
    """Dictionary replay: (query positions, expected values) read off a sequence."""
    table: dict[int, int] = {}
    i = 0
    while tokens[i] != SEP:
        table[int(tokens[i])] = int(tokens[i + 1])
        i += 2
    positions, values = [], []
    i += 1
    while i < len(tokens):
        tok = int(tokens[i])
        if tok in table:
            positions.append(i)
            values.append(table[tok])
            i += 2
        else:
            i += 1
    return positions, values


def eval_mqar(model, batch: MqarBatch, batch_size: int = 128) -> float:
    """Fraction of query positions whose argmax logit is the stored value."""
    from ..autodiff import no_grad

    hits = total = 0
    with no_grad():
        for s in range(0, len(batch), batch_size):
            sub = batch.subset(slice(s, s + batch_size))
            logits = model.forward(sub.tokens).data
            pred = np.take_along_axis(logits.argmax(-1), sub.query_positions, axis=1)
            hits += int((pred == sub.answers).sum())
            total += sub.answers.size
    return hits / total


@dataclass
class MqarTrainConfig:
    seq_len: int = 64
    n_pairs: int = 4
    vocab: int = 64
    min_gap: int = 8
    n_train: int = 20000
    n_test: int = 1000
    steps: int = 3000
    lr: float = 3e-3
    batch_size: int = 32
    warmup: int = 200
    eval_every: int = 500


def train_mqar(model, cfg: MqarTrainConfig, seed: int = 0, log=None) -> float:
    """Train on a fixed pool of instances and return held-out accuracy.

    ``log``, if given, is called as ``log(step, loss, accuracy_or_None)``.
    """
    from .loop import train_step
    from .optim import AdamW, cosine_lr

    gen = dict(seq_len=cfg.seq_len, n_pairs=cfg.n_pairs, vocab=cfg.vocab, min_gap=cfg.min_gap)
    train = generate_mqar(seed + 1, n_instances=cfg.n_train, **gen)
    test = generate_mqar(seed + 2, n_instances=cfg.n_test, **gen)
    rng = np.random.default_rng(seed + 3)
    opt = AdamW(lr=cfg.lr)
    for step in range(cfg.steps):
        b = train.subset(rng.integers(0, len(train), cfg.batch_size))
        loss = train_step(model, opt, lambda: model.loss(b.tokens, b.targets, b.weights),
                          cosine_lr(step, cfg.lr, cfg.steps, cfg.warmup))
        if log is not None:
            done = step + 1
            acc = eval_mqar(model, test.subset(slice(0, 200))) if done % cfg.eval_every == 0 else None
            log(done, loss, acc)
    return eval_mqar(model, test)
