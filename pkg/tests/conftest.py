"""Shared fixtures: the desk-scale corpus and trained model, and the
acceptance summary printed at the end of the run."""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from qudec.data import RainPair, SyntheticRainConfig, sample_clean_images, synthesize_rain
from qudec.labeling import ThresholdConfig, generate_label_map
from qudec.model import QuDeC
from qudec.niqe import default_pristine_model
from qudec.training import TrainConfig, Trainer, TrainingSample

DESK_PAIRS = 8
DESK_SIZE = 256
DESK_MAX_STEPS = 2000

ACCEPTANCE_LINES: list[str] = []


def desk_pairs(clean_seed: int, rain_seed: int, prefix: str) -> list[RainPair]:
    clean = sample_clean_images(DESK_PAIRS, DESK_SIZE, seed=clean_seed)
    return [synthesize_rain(c, SyntheticRainConfig(seed=rain_seed + k), f"{prefix}{k}")
            for k, c in enumerate(clean)]


def desk_samples(pairs: list[RainPair]) -> list[TrainingSample]:
    pristine, cfg = default_pristine_model(), ThresholdConfig()
    return [TrainingSample(p, generate_label_map(p.rainy, pristine, cfg)) for p in pairs]


@dataclass
class DeskRun:
    model: QuDeC
    train_pairs: list[RainPair]
    test_pairs: list[RainPair]
    steps: int
    seconds: float
    history: list[dict]


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    """QuDeC at published widths trained on 8 synthetic 256x256 pairs."""
    train_pairs = desk_pairs(clean_seed=0, rain_seed=100, prefix="train")
    test_pairs = desk_pairs(clean_seed=1, rain_seed=500, prefix="test")
    samples = desk_samples(train_pairs)
    trainer = Trainer(TrainConfig.desk())
    start = time.time()
    epoch = 1
    while trainer.state.step < DESK_MAX_STEPS:
        trainer.set_epoch(epoch)
        trainer.run_epoch(samples, DESK_MAX_STEPS)
        epoch += 1
    trainer.model.eval()
    return DeskRun(trainer.model, train_pairs, test_pairs, trainer.state.step,
                   time.time() - start, trainer.history)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion, then assert."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
