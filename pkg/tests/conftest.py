import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("plmlab", deadline=None, max_examples=60)
settings.load_profile("plmlab")

MNIST5K_FILES = (
    "mnist5k-train-images-idx3-ubyte", "mnist5k-train-labels-idx1-ubyte",
    "mnist5k-test-images-idx3-ubyte", "mnist5k-test-labels-idx1-ubyte",
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist5k_dir(tmp_path_factory):
    """Directory holding the 5k MNIST IDX files.

    Uses ``$PLMLAB_MNIST5K`` when it points at a prepared directory, otherwise
    writes the files from the table bundled with mlxtend; skips when neither
    is available.
    """
    env = os.environ.get("PLMLAB_MNIST5K")
    if env and all((Path(env) / f).exists() for f in MNIST5K_FILES):
        return Path(env)
    from plmlab.errors import FormatError
    from plmlab.mnist5k import write_mnist5k

    out = tmp_path_factory.mktemp("mnist5k")
    try:
        write_mnist5k(out)
    except FormatError as exc:
        pytest.skip(f"no 5k MNIST source: {exc}")
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, echoed at the end of the run."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
