"""Measurement harness: decode profiling, holographic layer reports and experiment runs."""

from __future__ import annotations

import csv
import json
import shutil
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import ConfigError, ExperimentConfig, read_config
from .holo import ReferenceBeam, layer_deltas, train_layerwise_sequential, write_layer_report
from .model import FDM
from .train.baseline import AttentionBaseline
from .train.corpus import fixed_windows, load_corpus
from .train.freeze_scan import FreezeScanSchedule, run_freeze_scan
from .train.mqar import MqarTrainConfig, train_mqar

PROFILE_FIELDS = ("prompt_length", "decode_state_bytes", "slot_count", "tokens_per_second", "generated_tokens")


@dataclass
class MemoryReport:
    prompt_length: int
    decode_state_bytes: int
    slot_count: int
    tokens_per_second: float
    generated_tokens: int


def _generate(model: FDM, prompt: np.ndarray, n: int) -> tuple[float, object]:
    logits, state = model.prefill(prompt)
    tok = int(np.argmax(logits[-1]))
    start = time.perf_counter()
    for i in range(n):
        logits = model.decode_step(state, tok)
        if not np.all(np.isfinite(logits)):
            bad = int(np.sum(~np.isfinite(logits)))
            raise NumericError(f"non-finite logits at decode step {i} (position {state.position - 1}, "
                               f"{bad} of {logits.size} entries, prompt length {len(prompt)})")
        tok = int(np.argmax(logits))
    return time.perf_counter() - start, state


def profile_decode(model: FDM, prompt_lengths, gen_tokens: int = 64, runs: int = 3,
                   seed: int = 0) -> list[MemoryReport]:
    """Greedy decode after prompts of each length; bytes come from the state's own accounting.

    Every length gets ``runs + 1`` timed generations and the first is thrown
    away as warmup.  Speed is the median of the rest.
    """
    if runs < 1 or gen_tokens < 1:
        raise ValueError("runs and gen_tokens must be positive")
    rng = np.random.default_rng(seed)
    reports = []
    for n in prompt_lengths:
        prompt = rng.integers(0, model.cfg.vocab_size, int(n))
        speeds, nbytes, slots = [], set(), set()
        for r in range(runs + 1):
            elapsed, state = _generate(model, prompt, gen_tokens)
            nbytes.add(state.nbytes())
            slots.add(max(state.slot_counts()))
            if r > 0:
                speeds.append(gen_tokens / elapsed)
        if len(nbytes) != 1:
            raise RuntimeError(f"decode state size varied between runs at prompt length {n}: {sorted(nbytes)}")
        reports.append(MemoryReport(int(n), nbytes.pop(), slots.pop(), statistics.median(speeds), gen_tokens))
    return reports


def write_profile_csv(path, reports: list[MemoryReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PROFILE_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def report_holographic_layers(model: FDM, beams: dict[int, ReferenceBeam], valset, path=None):
    """Per-layer loss/perplexity deltas of ``beams`` on ``valset = (inputs, targets)``."""
    rows = layer_deltas(model, beams, *valset)
    if path is not None:
        write_layer_report(path, rows)
    return rows


# ---------------------------------------------------------------- experiments
def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _corpus(cfg: ExperimentConfig):
    path = cfg.section("train").get("corpus")
    if path is None:
        raise ConfigError("[train] corpus is required for this task")
    if not Path(path).exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    return load_corpus(path)


def _schedule(cfg: ExperimentConfig, seed: int) -> FreezeScanSchedule:
    kw = cfg.section("train")
    kw.pop("corpus", None)
    return FreezeScanSchedule(seed=seed, **kw)


def _load_model(path: str) -> FDM:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return FDM.load(path)


def _run_mqar(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    kw = cfg.section("mqar")
    arch = kw.pop("arch", "fdm")
    task = MqarTrainConfig(**kw)
    if arch == "fdm":
        model = FDM(replace(cfg.model, vocab_size=task.vocab, T=task.seq_len, seed=seed))
    elif arch == "baseline":
        model = AttentionBaseline(cfg.model.d_model, cfg.model.n_layers, task.vocab, task.seq_len, seed=seed)
    else:
        raise ConfigError(f"[mqar] unknown arch {arch!r}")
    with open(out / f"mqar_seed{seed}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "train_loss", "accuracy"))
        acc = train_mqar(model, task, seed, log=lambda s, l, a: w.writerow((s, l, "" if a is None else a)))
    return {"accuracy": acc}


def _run_freeze_scan(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    corpus = _corpus(cfg)
    model = FDM(replace(cfg.model, seed=seed))
    log = run_freeze_scan(model, corpus, _schedule(cfg, seed), log_path=out / f"train_seed{seed}.csv",
                          checkpoint_dir=out / f"ckpt_seed{seed}")
    model.save(out / f"model_seed{seed}.ckpt", {"seed": seed})
    return {"final_val_loss": log.final_val_loss(), "phase_boundary": log.phase_boundary}


def _run_holo(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    corpus = _corpus(cfg)
    kw = cfg.section("holo")
    ckpt = kw.pop("checkpoint", None)
    if ckpt is not None:
        model = _load_model(ckpt)
    else:
        model = FDM(replace(cfg.model, seed=seed))
        run_freeze_scan(model, corpus, _schedule(cfg, seed))
    layers = kw.pop("layers", list(range(model.cfg.n_layers)))
    rows = train_layerwise_sequential(model, corpus, layers, seed=seed, **kw)
    write_layer_report(out / f"holo_layers_seed{seed}.csv", rows)
    model.save(out / f"holo_seed{seed}.ckpt", {"seed": seed})
    return {f"delta_loss_layer{r.layer}": r.delta_loss for r in rows}


def _run_profile(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    kw = cfg.section("profile")
    ckpt = kw.pop("checkpoint", None)
    model = _load_model(ckpt) if ckpt is not None else FDM(replace(cfg.model, seed=seed))
    reports = profile_decode(model, kw.get("prompt_lengths", [128, 512, 1024, 2048]), kw.get("gen_tokens", 64),
                             kw.get("runs", 3), seed)
    write_profile_csv(out / f"profile_seed{seed}.csv", reports)
    # timings vary run to run, so only the byte accounting goes to metrics
    return {f"decode_state_bytes_N{r.prompt_length}": r.decode_state_bytes for r in reports}


TASK_RUNNERS = {"mqar": _run_mqar, "freeze-scan": _run_freeze_scan, "holo": _run_holo, "profile": _run_profile}


def run_experiment(config, out_dir, seeds: list[int] | None = None) -> Path:
    """Run the task described by a config file (or parsed config) into ``out_dir``.

    The directory receives the config text, the code version, the seeds, the
    per-seed CSV logs and a ``metrics.json`` that holds no timings.
    """
    cfg = config if isinstance(config, ExperimentConfig) else read_config(config)
    if seeds:
        cfg.seeds = list(seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(config, (str, Path)):
        shutil.copyfile(config, out / "config.cfg")
    else:
        (out / "config.cfg").write_text(cfg.source)
    (out / "code_version.txt").write_text(code_version() + "\n")
    (out / "seeds.json").write_text(json.dumps({"seeds": cfg.seeds, "deterministic": cfg.deterministic}) + "\n")
    runner = TASK_RUNNERS[cfg.task]
    metrics = {"task": cfg.task, "name": cfg.name, "per_seed": {}}
    for seed in cfg.seeds:
        metrics["per_seed"][str(seed)] = runner(cfg, seed, out)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return out


def holdout_windows(corpus, n: int = 32, seq_len: int = 128, seed: int = 0):
    return fixed_windows(corpus.val, n, seq_len, seed=seed + 10_000)
