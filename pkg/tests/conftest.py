"""Shared, session-cached training runs.

Several test files need the same trained models (copy, cipher and reorder tasks
at several lambdas and seeds).  Each run is trained at most once per session.
"""

import time
from functools import lru_cache

import pytest

from monoattn.corpus import gen_cipher, gen_reorder
from monoattn.monoloss import MonoConfig
from monoattn.trainer import TrainConfig, evaluate, fit

SCHEDULE = dict(batch_size=32, max_steps=3000, checkpoint_interval=250, patience=4)


@lru_cache(maxsize=None)
def task_splits(task: str, seed: int):
    if task == "cipher":
        return gen_cipher(2000, seed=seed)
    if task == "copy":
        return gen_cipher(2000, seed=seed, identity=True)
    if task == "reorder":
        return gen_reorder(2000, 0.3, seed=seed)
    raise ValueError(task)


class Run:
    def __init__(self, config, result, test_eval, seconds):
        self.config, self.result, self.test, self.seconds = config, result, test_eval, seconds

    @property
    def best(self):
        return next(r for r in self.result.trace if r.step == self.result.best_step)


@lru_cache(maxsize=None)
def trained(task: str, lam: float, seed: int, heads: str = "all") -> Run:
    splits = task_splits(task, seed)
    config = TrainConfig(mono=MonoConfig(lam=lam, head_mask=heads), seed=seed, **SCHEDULE)
    start = time.process_time()
    result = fit(splits, config)
    seconds = time.process_time() - start
    return Run(config, result, evaluate(result.model, splits.test, result.vocabs, config.mono), seconds)


@pytest.fixture(scope="session")
def train_run():
    return trained


# --- acceptance verdicts -------------------------------------------------------

VERDICTS: dict = {}


def record_verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    VERDICTS[number] = line
    print(line)


@pytest.fixture
def verdict():
    return record_verdict


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
