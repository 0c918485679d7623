import numpy as np
import pytest

from kfcsim.data import Dataset, generate_synthetic


def central_diff_grad(f, x, eps=1e-5):
    """Independent numerical gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def max_rel_error(a, b, floor=1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def blobs3():
    """k=3, p=16 separable-ish blobs used across module tests."""
    return generate_synthetic(k=3, p=16, n_per_class=100, spread=0.05, seed=1)


@pytest.fixture(scope="session")
def blobs2():
    return generate_synthetic(k=2, p=4, n_per_class=100, spread=0.05, seed=3)


def tiny_dataset(X, y, k):
    X = np.asarray(X, dtype=np.float64)
    return Dataset(X, np.asarray(y), k, X.shape[1])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
