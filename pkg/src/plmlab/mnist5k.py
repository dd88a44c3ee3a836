"""Write a 5,000-digit MNIST subset as IDX files.

The digits come from the ``mnist_5k.csv.gz`` table that ships inside the
``mlxtend`` wheel (500 real MNIST images per class, 784 pixel columns and a
label column). The table is read from disk directly, so mlxtend itself is
never imported. Per class, the first ``400`` rows become the training
file pair and the remaining ``100`` the test pair.
"""

import gzip
import importlib.util
from pathlib import Path

import numpy as np

from plmlab.data import write_idx
from plmlab.errors import FormatError

TRAIN_FILES = ("mnist5k-train-images-idx3-ubyte", "mnist5k-train-labels-idx1-ubyte")
TEST_FILES = ("mnist5k-test-images-idx3-ubyte", "mnist5k-test-labels-idx1-ubyte")


def bundled_csv_path():
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FormatError("mlxtend is not installed; `pip install mlxtend` provides the 5k MNIST table")
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FormatError(f"{path} not found in the installed mlxtend")
    return path


def load_table(path=None):
    path = bundled_csv_path() if path is None else Path(path)
    with gzip.open(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    if table.ndim != 2 or table.shape[1] != 785:
        raise FormatError(f"unexpected MNIST table shape {table.shape}")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.int64)


def write_mnist5k(out_dir, train_per_class=400, csv_path=None):
    """Create the train/test IDX pairs under ``out_dir``; returns their paths."""
    images, labels = load_table(csv_path)
    train_idx, test_idx = [], []
    for k in np.unique(labels):
        rows = np.flatnonzero(labels == k)
        train_idx.extend(rows[:train_per_class])
        test_idx.extend(rows[train_per_class:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, idx, files in (("train", train_idx, TRAIN_FILES), ("test", test_idx, TEST_FILES)):
        img_p, lab_p = out / files[0], out / files[1]
        write_idx(images[idx], labels[idx], img_p, lab_p)
        paths[name] = (img_p, lab_p)
    return paths


if __name__ == "__main__":
    import sys

    for split, (a, b) in write_mnist5k(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k").items():
        print(split, a, b)
