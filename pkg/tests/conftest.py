"""Shared fixtures.

``digits_root`` is an IDX directory holding real handwritten digits: the
directory named by ``$BHDD_DATA_ROOT`` when it is set, otherwise the
5,000-digit MNIST sample shipped with mlxtend exported to a temp dir.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from bhddbench.data import DATA_ROOT_ENV, SPLIT_FILES, Dataset, find_split_files, subset_indices, write_dataset


def export_mlxtend_digits(out: Path, n_test: int = 1000, seed: int = 42) -> Path:
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    full = Dataset(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64))
    test_idx = subset_indices(full, n_test, seed)
    train_idx = np.setdiff1d(np.arange(len(full)), test_idx)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img, lab = SPLIT_FILES[split]
        write_dataset(full.take(idx, split), out / img, out / lab)
    return out


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        try:
            find_split_files(env, "train")
            find_split_files(env, "test")
            return Path(env)
        except FileNotFoundError:
            pass
    return export_mlxtend_digits(tmp_path_factory.mktemp("digits"))


@pytest.fixture(scope="session")
def small_digits_root(tmp_path_factory, digits_root) -> Path:
    """600 train / 200 test digits for quick end-to-end runs."""
    from bhddbench.data import load_split, subset

    out = tmp_path_factory.mktemp("small_digits")
    for split, n in (("train", 600), ("test", 200)):
        ds = subset(load_split(digits_root, split), n, 7)
        img, lab = SPLIT_FILES[split]
        write_dataset(ds, out / img, out / lab)
    return out


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# -- acceptance summary lines -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"[{status}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """``criterion(number, title, passed, detail)`` records an acceptance line."""
    return record_criterion
