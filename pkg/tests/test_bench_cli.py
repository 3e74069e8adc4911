import json

import numpy as np
import pytest

from fdm.bench import PROFILE_FIELDS, profile_decode, report_holographic_layers, run_experiment, write_profile_csv
from fdm.cli import main
from fdm.config import ConfigError, parse_config
from fdm.holo import ReferenceBeam
from fdm.model import FDM, ModelConfig
from fdm.train.corpus import desk_corpus_text

TINY_MQAR = """
[experiment]
task = mqar
seeds = 0

[model]
d_model = 16
n_layers = 1
W = 8
K = 4

[mqar]
n_train = 64
n_test = 16
steps = 3
batch_size = 4
warmup = 1
eval_every = 2
"""


@pytest.fixture()
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(desk_corpus_text(60_000)[:60_000])
    return path


# ---------------------------------------------------------------- config
def test_config_reads_sections():
    cfg = parse_config(TINY_MQAR)
    assert cfg.task == "mqar" and cfg.seeds == [0]
    assert cfg.model.W == 8 and cfg.model.d_model == 16
    assert cfg.section("mqar")["steps"] == 3


@pytest.mark.parametrize("text", [
    "[experiment]\ntask = mqar\ncolour = red\n",
    "[nonsense]\na = 1\n",
    "[experiment]\ntask = dance\n",
    "[model]\nW = eight\n",
    "[model]\npreset = galaxy-brain\n",
    "[experiment]\nseeds =\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# --------------------------------------------------------------- profile
def test_profile_bytes_constant(tmp_path):
    model = FDM(ModelConfig(d_model=16, n_layers=1))
    reports = profile_decode(model, [16, 40], gen_tokens=4, runs=1)
    assert len({r.decode_state_bytes for r in reports}) == 1
    assert all(r.slot_count == 12 and r.tokens_per_second > 0 for r in reports)
    write_profile_csv(tmp_path / "p.csv", reports)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(PROFILE_FIELDS)
    with pytest.raises(ValueError):
        profile_decode(model, [16], runs=0)


def test_report_zero_beams_gives_zero_deltas(tmp_path):
    model = FDM(ModelConfig(d_model=16, n_layers=2))
    beams = {l: ReferenceBeam.zeros(2, model.cfg.D, 16, layer=l) for l in (0, 1)}
    x = np.random.default_rng(0).integers(0, 258, (2, 16))
    rows = report_holographic_layers(model, beams, (x, x), tmp_path / "r.csv")
    assert [r.delta_loss for r in rows] == [0.0, 0.0]
    assert (tmp_path / "r.csv").exists()


# ------------------------------------------------------------ experiments
def test_run_experiment_is_reproducible(tmp_path):
    cfg_path = tmp_path / "m.cfg"
    cfg_path.write_text(TINY_MQAR)
    a = run_experiment(cfg_path, tmp_path / "a")
    b = run_experiment(cfg_path, tmp_path / "b")
    for name in ("metrics.json", "config.cfg", "seeds.json", "mqar_seed0.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "code_version.txt").exists()
    metrics = json.loads((a / "metrics.json").read_text())
    assert set(metrics["per_seed"]) == {"0"}


def test_freeze_scan_checkpoints_bitwise(tmp_path, corpus_file):
    text = f"""
[experiment]
task = freeze-scan
[model]
d_model = 16
n_layers = 1
[train]
corpus = {corpus_file}
phase1_steps = 2
phase2_steps = 2
batch_size = 2
seq_len = 16
warmup = 1
eval_every = 2
eval_windows = 2
"""
    a = run_experiment(parse_config(text), tmp_path / "a")
    b = run_experiment(parse_config(text), tmp_path / "b")
    assert (a / "model_seed0.ckpt").read_bytes() == (b / "model_seed0.ckpt").read_bytes()


# -------------------------------------------------------------------- cli
def test_cli_eval_mqar(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text(TINY_MQAR)
    assert main(["eval-mqar", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--seed", "3"]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert json.loads((tmp_path / "o" / "seeds.json").read_text())["seeds"] == [3]


def test_cli_missing_corpus_names_path(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("[experiment]\ntask = freeze-scan\n[train]\ncorpus = /no/such/corpus.txt\n")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    assert "/no/such/corpus.txt" in capsys.readouterr().err


def test_cli_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[experiment]\ntask = mqar\nbogus = 1\n")
    assert main(["eval-mqar", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["eval-mqar", "--config", str(tmp_path / "missing.cfg"), "--out-dir", str(tmp_path)]) == 2
    wrong = tmp_path / "w.cfg"
    wrong.write_text(TINY_MQAR)
    assert main(["train", "--config", str(wrong), "--out-dir", str(tmp_path)]) == 2


def test_cli_holo_report_missing_checkpoint(tmp_path, corpus_file):
    assert main(["holo-report", "--checkpoint", str(tmp_path / "none.ckpt"), "--corpus", str(corpus_file),
                 "--out-dir", str(tmp_path)]) == 2


def test_cli_holo_report(tmp_path, corpus_file, capsys):
    model = FDM(ModelConfig(d_model=16, n_layers=2))
    model.attach_beam(0, heads=1)
    model.save(tmp_path / "m.ckpt")
    assert main(["holo-report", "--checkpoint", str(tmp_path / "m.ckpt"), "--corpus", str(corpus_file),
                 "--out-dir", str(tmp_path)]) == 0
    assert "layer 0" in capsys.readouterr().out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_numeric_failure_exit_code(tmp_path, monkeypatch):
    import fdm.bench as bench

    def boom(*a, **k):
        from fdm.autodiff import NumericError
        raise NumericError("non-finite logits")

    monkeypatch.setitem(bench.TASK_RUNNERS, "profile", boom)
    assert main(["profile-decode", "--out-dir", str(tmp_path)]) == 3
