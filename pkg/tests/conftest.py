from pathlib import Path

import numpy as np
import pytest

from cpcl.cli.datasets import load_idx_pair
from cpcl.orchestrator import split_dataset

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist10k"


@pytest.fixture(scope="session")
def mnist():
    raw = load_idx_pair(MNIST / "images-idx3-ubyte.gz", MNIST / "labels-idx1-ubyte.gz")
    return split_dataset(raw.x, raw.y, 0.2, seed=0, classes=10)


@pytest.fixture
def toy():
    rng = np.random.default_rng(3)
    x = rng.random((240, 12))
    w = rng.standard_normal((12, 3))
    y = np.argmax(x @ w + 0.1 * rng.standard_normal((240, 3)), axis=1)
    return split_dataset(x, y, 0.25, seed=0, classes=3)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
