"""Write the 5,000-digit MNIST sample bundled with mlxtend as IDX files.

Usage: python3 scripts/export_mnist_sample.py OUT_DIR [--test N]

A seed-42 stratified draw of N digits (default 1000) becomes the test split
and the remainder the training split, laid out as ``--data-root`` expects.
"""

import argparse
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from bhddbench.data import SPLIT_FILES, Dataset, subset_indices, write_dataset


def export(out: Path, n_test: int = 1000, seed: int = 42) -> None:
    X, y = mnist_data()
    full = Dataset(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64))
    test_idx = subset_indices(full, n_test, seed)
    train_idx = np.setdiff1d(np.arange(len(full)), test_idx)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img, lab = SPLIT_FILES[split]
        write_dataset(full.take(idx, split), out / img, out / lab)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test", type=int, default=1000)
    args = ap.parse_args()
    export(args.out_dir, args.test)
