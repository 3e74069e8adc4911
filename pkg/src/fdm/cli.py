"""``fdm`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .autodiff import NumericError, checked
from .config import ConfigError, ExperimentConfig, parse_config, read_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SUBCOMMAND_TASK = {"train": "freeze-scan", "eval-mqar": "mqar", "profile-decode": "profile", "holo-train": "holo"}


def _load(args, task: str) -> ExperimentConfig:
    cfg = read_config(args.config) if args.config else parse_config("")
    if args.config and cfg.task != task:
        raise ConfigError(f"config task {cfg.task!r} does not match subcommand (expects {task!r})")
    cfg.task = task
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _run_task(args, task: str) -> int:
    from .bench import run_experiment

    cfg = _load(args, task)
    out = run_experiment(cfg, args.out_dir)
    print((out / "metrics.json").read_text(), end="")
    return EXIT_OK


def _holo_report(args) -> int:
    from .bench import holdout_windows, report_holographic_layers
    from .model import FDM
    from .train.corpus import load_corpus

    for p in (args.checkpoint, args.corpus):
        if not Path(p).exists():
            raise FileNotFoundError(f"not found: {p}")
    model = FDM.load(args.checkpoint)
    beams = dict(model.beams)
    corpus = load_corpus(args.corpus)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    out = Path(args.out_dir) / "holo_layers.csv"
    rows = report_holographic_layers(model, beams, holdout_windows(corpus, seed=args.seed or 0), out)
    for r in rows:
        print(f"layer {r.layer}: dLoss {r.delta_loss:+.4f}  dPPL {r.delta_ppl:+.3f}")
    return EXIT_OK


def _gradcheck(args) -> int:
    import numpy as np

    from .autodiff import finite_difference_check
    from .model import FDM, ModelConfig

    cfg = ModelConfig(d_model=8, n_layers=2, vocab_size=11, W=2, K=1, T=6, seed=args.seed or 0)
    model = FDM(cfg)
    rng = np.random.default_rng(cfg.seed)
    for n, t in model.named_parameters():
        t.data[...] += rng.normal(0, 0.1, t.shape)  # move off the zero-init symmetry
    tokens = rng.integers(0, cfg.vocab_size, (2, 6))
    targets = rng.integers(0, cfg.vocab_size, (2, 6))
    params = model.parameters()
    err = finite_difference_check(lambda *_: model.loss(tokens, targets), params, args.step, args.points)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="override the config's seed list")
    common.add_argument("--deterministic", action="store_true", help="serial, bitwise-reproducible mode")
    common.add_argument("--out-dir", default="artifacts", help="artifact directory")
    parser = argparse.ArgumentParser(prog="fdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="two-phase language-model training")
    sub.add_parser("eval-mqar", parents=[common], help="train and score associative recall")
    sub.add_parser("profile-decode", parents=[common], help="decode state size and speed per prompt length")
    sub.add_parser("holo-train", parents=[common], help="layer-wise reference-beam training")
    rep = sub.add_parser("holo-report", parents=[common], help="per-layer deltas of a beam checkpoint")
    rep.add_argument("--checkpoint", required=True)
    rep.add_argument("--corpus", required=True)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--step", type=float, default=1e-3, help="finite-difference step")
    gc.add_argument("--points", type=int, choices=(2, 4), default=4, help="central stencil width")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with checked(True):
            if args.command in SUBCOMMAND_TASK:
                return _run_task(args, SUBCOMMAND_TASK[args.command])
            if args.command == "holo-report":
                return _holo_report(args)
            return _gradcheck(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
