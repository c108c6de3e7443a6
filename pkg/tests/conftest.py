import numpy as np
import pytest

from avfuse import autodiff as ad
from avfuse.autodiff import Tensor


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_check(build, arrays, seed=0, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a tensor; the loss is its inner product with a
    fixed random weighting so that every output entry matters.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(*tensors)
        w = Tensor(rng.standard_normal(out.shape))
        loss = ad.total(out * w)
    ad.backward(loss, tape)

    def f():
        return float(ad.total(build(*tensors) * w).data)

    return max(rel_error(t.grad, numeric_grad(f, t.data, h)) for t in tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def acceptance_line(tag: str, ok: bool, detail: str, status: str = "") -> None:
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    line = f"{tag} {status or ('PASS' if ok else 'FAIL')}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
