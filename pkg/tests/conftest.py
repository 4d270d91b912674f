"""Shared fixtures: full CLI training runs are expensive, so each runs once per session."""
import json
import time
from pathlib import Path

import pytest

from gtnp import cli

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_CONFIG = ROOT / "configs" / "synth_acceptance.json"
EMERGING_CONFIG = ROOT / "configs" / "synth_emerging.json"

# criterion number -> (status, detail); filled by test_acceptance, printed at the end of the session
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def _train(config: Path, out: Path) -> dict:
    start = time.perf_counter()
    code = cli.run(["train", "--config", str(config), "--out", str(out)])
    seconds = time.perf_counter() - start
    assert code == 0, f"training run for {config.name} exited with {code}"
    metrics = json.loads((out / "metrics.json").read_text())
    return {"dir": out, "seconds": seconds, "metrics": metrics}


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    return _train(ACCEPTANCE_CONFIG, tmp_path_factory.mktemp("bench_a"))


@pytest.fixture(scope="session")
def benchmark_rerun(tmp_path_factory):
    return _train(ACCEPTANCE_CONFIG, tmp_path_factory.mktemp("bench_b"))


@pytest.fixture(scope="session")
def emerging_run(tmp_path_factory):
    return _train(EMERGING_CONFIG, tmp_path_factory.mktemp("emerging"))


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status:<4} {detail}")
