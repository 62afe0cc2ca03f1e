"""Shared fixtures. The smoke-training run is expensive, so it is built once per session."""

from dataclasses import dataclass
from typing import List

import pytest
from threadpoolctl import threadpool_limits

from cec_cnn import data as dp
from cec_cnn.arch import ArchitectureSpec, Model, build_network
from cec_cnn.metrics import MetricSummary
from cec_cnn.training import EpochRecord, TrainConfig, evaluate_repeated, train

SMOKE_SEED = 0
SMOKE_EPOCHS = 30


@dataclass
class SmokeRun:
    records: List[dp.PatchRecord]
    split: dp.SplitManifest
    model: Model
    history: List[EpochRecord]
    test_summary: MetricSummary


@pytest.fixture(scope="session")
def smoke_run() -> SmokeRun:
    with threadpool_limits(limits=1):
        records = dp.generate_synthetic(8, 40, dp.ClassParams(difficulty=1.0), seed=SMOKE_SEED)
        split = dp.split_by_patient(records, 0.7, seed=SMOKE_SEED)
        model = build_network(ArchitectureSpec(input_size=32), seed=SMOKE_SEED)
        cfg = TrainConfig(epochs=SMOKE_EPOCHS, seed=SMOKE_SEED, input_size=32)
        result = train(model, split.select(records, "train"), cfg)
        summary = evaluate_repeated(model, split.select(records, "test"), repeats=20, input_size=32, seed=SMOKE_SEED)
    return SmokeRun(records, split, model, result.history, summary)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
