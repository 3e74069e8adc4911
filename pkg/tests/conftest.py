"""Shared helpers for the acceptance suite.

Long experiments store their outcome under ``artifacts/acceptance`` keyed by
their parameters and a hash of the package source, so a rerun reuses a result
only if neither changed.  Set ``FDM_ACCEPTANCE_FRESH=1`` to recompute anyway.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FDM_ACCEPTANCE_DIR", ROOT / "artifacts" / "acceptance"))

VERDICTS: list[str] = []


def source_digest() -> str:
    h = hashlib.sha256()
    for f in sorted((ROOT / "src" / "fdm").rglob("*.py")):
        h.update(f.relative_to(ROOT).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def cached_experiment(name: str, params: dict, compute) -> dict:
    """Run ``compute(work_dir) -> dict`` unless a result for the same inputs exists."""
    key = hashlib.sha256(json.dumps([params, source_digest()], sort_keys=True).encode()).hexdigest()[:12]
    work = CACHE / f"{name}-{key}"
    result_file = work / "result.json"
    if result_file.exists() and os.environ.get("FDM_ACCEPTANCE_FRESH") != "1":
        return json.loads(result_file.read_text())
    work.mkdir(parents=True, exist_ok=True)
    result = compute(work)
    result_file.write_text(json.dumps({"params": params, **result}, indent=2, sort_keys=True) + "\n")
    return json.loads(result_file.read_text())


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_corpus_path():
    from fdm.train.corpus import write_desk_corpus

    path = CACHE / "desk_corpus.txt"
    if not path.exists():
        write_desk_corpus(path)
    return path
