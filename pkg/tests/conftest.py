import numpy as np
import pytest

from leafpatch import numerics as nx


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        up = f()
        arr[i] = old - step
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tensor_factory(rng):
    def make(*shape, grad=True):
        return nx.Tensor(rng.standard_normal(shape), requires_grad=grad)

    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
