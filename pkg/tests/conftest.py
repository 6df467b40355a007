import random

import numpy as np
import pytest

from nnemd.group import named_group


@pytest.fixture(scope="session")
def g64():
    return named_group("test64")


@pytest.fixture(scope="session")
def g512():
    return named_group("demo512")


@pytest.fixture
def rng():
    return random.Random(20240607)


@pytest.fixture
def nrng():
    return np.random.default_rng(7)


@pytest.fixture(scope="session")
def mnist_subset(tmp_path_factory):
    """Seeded stratified 1000/1000 split of the bundled 5000-sample MNIST
    subset, written out as idx files so the real loader is exercised."""
    from mlxtend.data import mnist_data

    from nnemd.data import write_idx

    X, y = mnist_data()
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        train.extend(idx[:100])
        test.extend(idx[100:200])
    train = rng.permutation(train)
    test = rng.permutation(test)
    d = tmp_path_factory.mktemp("mnist")
    paths = {}
    for name, rows in (("train", train), ("test", test)):
        img = d / f"{name}-images-idx3-ubyte.gz"
        lab = d / f"{name}-labels-idx1-ubyte.gz"
        write_idx(img, X[rows].reshape(-1, 28, 28), compress=True)
        write_idx(lab, y[rows], compress=True)
        paths[name] = (img, lab)
    return paths


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one line per acceptance criterion; printed at the end of the run."""

    def report(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
