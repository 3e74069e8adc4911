"""Two-phase training: everything jointly, then the cache set with the wave frozen."""

from __future__ import annotations

import csv
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..autodiff import load_checkpoint, no_grad, save_checkpoint
from ..model import tag_of
from .corpus import Corpus, fixed_windows, sample_windows
from .loop import train_step
from .optim import AdamW, cosine_lr

LOG_FIELDS = ("step", "phase", "lr", "train_loss", "val_loss", "wall_time")


@dataclass
class FreezeScanSchedule:
    phase1_steps: int = 1000
    phase2_steps: int = 500
    phase1_lr: float = 3e-3
    phase2_lr: float = 1e-4
    batch_size: int = 16
    seq_len: int = 128
    warmup: int = 200
    eval_every: int = 100
    eval_windows: int = 32
    patience: int | None = 5
    checkpoint_every: int | None = None
    freeze_phase2: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("phase lengths must be non-negative")
        if self.batch_size < 1 or self.seq_len < 1 or self.eval_every < 1:
            raise ValueError("batch_size, seq_len and eval_every must be positive")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    phase_boundary: int | None = None
    wave_grad_events: int = 0

    def final_val_loss(self) -> float:
        vals = [r["val_loss"] for r in self.rows if r["val_loss"] != ""]
        return float(vals[-1]) if vals else float("nan")

    def phase_rows(self, phase: int) -> list[dict]:
        return [r for r in self.rows if r["phase"] == phase]


def evaluate_loss(model, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 16) -> float:
    """Mean next-token loss over fixed windows."""
    total = 0.0
    with no_grad():
        for s in range(0, len(inputs), batch_size):
            x, y = inputs[s:s + batch_size], targets[s:s + batch_size]
            total += float(model.loss(x, y).data) * len(x)
    return total / len(inputs)


def _save_state(path: Path, model, opt: AdamW, rng, step: int, phase: int, best: float, stale: int,
                p1_end: int) -> None:
    tensors = dict(model.state_dict())
    for n, (m, v) in opt.moments.items():
        tensors[f"opt.m.{n}"] = m
        tensors[f"opt.v.{n}"] = v
    meta = {"step": step, "phase": phase, "opt_steps": opt.step_count, "rng": rng.bit_generator.state,
            "best": best, "stale": stale, "p1_end": p1_end, "config": asdict(model.cfg)}
    save_checkpoint(path, tensors, {n: ("optimizer" if n.startswith("opt.") else tag_of(n)) for n in tensors},
                    meta)


def _load_state(path: Path, model, opt: AdamW, rng):
    tensors, _, meta = load_checkpoint(path)
    model.load_state_dict({n: v for n, v in tensors.items() if not n.startswith("opt.")})
    opt.moments = {n[6:]: (tensors[n].copy(), tensors["opt.v." + n[6:]].copy())
                   for n in tensors if n.startswith("opt.m.")}
    opt.step_count = meta["opt_steps"]
    rng.bit_generator.state = meta["rng"]


def run_freeze_scan(model, corpus: Corpus, schedule: FreezeScanSchedule, log_path=None,
                    checkpoint_dir=None, resume: bool = False) -> TrainingLog:
    """Train ``model`` in place and return the per-step log.

    Phase 1 updates every parameter under a warmup+cosine schedule (stopping
    early on a validation plateau if ``patience`` is set).  Phase 2 starts a
    fresh optimizer at ``phase2_lr``; with ``freeze_phase2`` the wave set is
    frozen and a probe checks, every step, that none of it received a gradient
    or changed.  With ``freeze_phase2=False`` the same phase 2 runs jointly,
    which is the control arm of the A/B comparison.
    """
    sch = schedule
    rng = np.random.default_rng(sch.seed)
    val_x, val_y = fixed_windows(corpus.val, sch.eval_windows, sch.seq_len, seed=sch.seed + 10_000)
    log = TrainingLog()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_file = ckpt_dir / "state.ckpt" if ckpt_dir is not None else None

    step, phase, best, stale, p1_end = 0, 1, float("inf"), 0, sch.phase1_steps
    opt = AdamW(lr=sch.phase1_lr)
    if resume and ckpt_file is not None and ckpt_file.exists():
        meta = load_checkpoint(ckpt_file)[2]
        phase, p1_end = meta["phase"], meta["p1_end"]
        if phase == 2:
            opt = AdamW(lr=sch.phase2_lr)
            log.phase_boundary = p1_end
            if sch.freeze_phase2:
                model.set_trainable("wave", False)
        _load_state(ckpt_file, model, opt, rng)
        step, best, stale = meta["step"], meta["best"], meta["stale"]

    fh = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        kept = []
        if resume and log_path.exists():
            with log_path.open() as old:
                kept = [r for r in csv.DictReader(old) if int(r["step"]) <= step]
        fh = log_path.open("w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(kept)
        fh.flush()

    def snapshot():
        return {n: t.data.copy() for n, t in model.named_parameters() if tag_of(n) == "wave"}

    frozen = snapshot() if phase == 2 and sch.freeze_phase2 else {}
    t0 = time.perf_counter()
    try:
        while step < p1_end + sch.phase2_steps:
            if phase == 1 and step >= p1_end:
                phase, log.phase_boundary = 2, step
                opt = AdamW(lr=sch.phase2_lr)
                if sch.freeze_phase2:
                    model.set_trainable("wave", False)
                    frozen = snapshot()
            lr = cosine_lr(step, sch.phase1_lr, sch.phase1_steps, sch.warmup) if phase == 1 else sch.phase2_lr
            x, y = sample_windows(corpus.train, sch.batch_size, sch.seq_len, rng)
            loss = train_step(model, opt, lambda: model.loss(x, y), lr)
            if phase == 2 and sch.freeze_phase2:
                _probe_frozen(model, frozen, log)
            step += 1
            val = ""
            last = step == p1_end + sch.phase2_steps or (phase == 1 and step == p1_end)
            if step % sch.eval_every == 0 or last:
                val = evaluate_loss(model, val_x, val_y)
                if phase == 1 and sch.patience is not None:
                    best, stale = (val, 0) if val < best else (best, stale + 1)
                    if stale >= sch.patience:
                        p1_end = step
            row = {"step": step, "phase": phase, "lr": lr, "train_loss": loss, "val_loss": val,
                   "wall_time": round(time.perf_counter() - t0, 3)}
            log.rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if ckpt_file is not None and sch.checkpoint_every and step % sch.checkpoint_every == 0:
                _save_state(ckpt_file, model, opt, rng, step, phase, best, stale, p1_end)
        if ckpt_file is not None:
            _save_state(ckpt_file, model, opt, rng, step, phase, best, stale, p1_end)
    finally:
        if fh is not None:
            fh.close()
    return log


def _probe_frozen(model, snapshot: dict[str, np.ndarray], log: TrainingLog) -> None:
    """Gradient-flow probe: wave parameters get no gradient and stay bitwise fixed."""
    for n, t in model.named_parameters():
        if tag_of(n) != "wave":
            continue
        if t.grad is not None or t.requires_grad:
            log.wave_grad_events += 1
            raise RuntimeError(f"frozen parameter {n} received a gradient in phase 2")
        if n in snapshot and not np.array_equal(t.data, snapshot[n]):
            raise RuntimeError(f"frozen parameter {n} changed in phase 2")


@dataclass
class ABResult:
    seed: int
    frozen: TrainingLog
    joint: TrainingLog

    @property
    def frozen_wins(self) -> bool:
        return self.frozen.final_val_loss() < self.joint.final_val_loss()


def freeze_scan_ab(make_model, corpus: Corpus, schedule: FreezeScanSchedule, work_dir) -> ABResult:
    """Phase 2 with the wave frozen versus the same phase 2 trained jointly.

    Phase 1 runs once; both arms resume from its final checkpoint with the
    same optimizer reset, learning rate and batch sequence, so the only
    difference between them is whether the wave set is trainable.
    """
    work = Path(work_dir)
    start = work / "phase1"
    run_freeze_scan(make_model(), corpus, replace(schedule, phase2_steps=0, checkpoint_every=None),
                    log_path=work / "phase1.csv", checkpoint_dir=start)
    logs = {}
    for arm, freeze in (("frozen", True), ("joint", False)):
        (work / arm).mkdir(parents=True, exist_ok=True)
        shutil.copyfile(start / "state.ckpt", work / arm / "state.ckpt")
        model = make_model()
        logs[arm] = run_freeze_scan(model, corpus, replace(schedule, freeze_phase2=freeze, checkpoint_every=None),
                                    log_path=work / f"{arm}.csv", checkpoint_dir=work / arm, resume=True)
        model.save(work / arm / "model.ckpt", {"seed": schedule.seed, "arm": arm})
    return ABResult(schedule.seed, logs["frozen"], logs["joint"])
