import numpy as np
import pytest

from docrectify.tensor import Tensor, backward, precision


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(np.asarray(f()))
        flat[i] = old - h
        fm = float(np.asarray(f()))
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grads(loss_fn, tensors, h: float = 1e-6) -> float:
    """Worst relative error between autodiff and finite differences over ``tensors``.

    ``loss_fn`` builds a fresh graph from the tensors and returns a scalar
    Tensor.  Must be called inside ``precision(np.float64)``.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        fd = numeric_grad(lambda: loss_fn().data, t.data, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, fd))
    return worst


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        if detail:
            line += f" ({detail})"
        _CRITERIA[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
