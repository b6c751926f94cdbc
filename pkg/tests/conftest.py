import numpy as np
import pytest

from dietlab import numerics as nx


def fd_grad(f, x, step=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(op, *arrays, step=1e-5, seed=0):
    """Compare autodiff against finite differences for every operand of ``op``.

    The scalar objective is ``sum(op(...) * w)`` with fixed random ``w`` so
    every output element contributes a distinct weight.
    """
    rng = np.random.default_rng(seed)
    out_shape = op(*[nx.Tensor(a) for a in arrays]).shape
    w = rng.standard_normal(out_shape)
    errs = []
    for k in range(len(arrays)):
        leaves = [nx.Tensor(a, requires_grad=(j == k)) for j, a in enumerate(arrays)]
        y = op(*leaves)
        nx.backward(y, w)
        analytic = leaves[k].grad

        def f(xk, k=k):
            args = [nx.Tensor(xk if j == k else a) for j, a in enumerate(arrays)]
            return float((op(*args).data * w).sum())

        errs.append(rel_err(analytic, fd_grad(f, arrays[k], step)))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the session
VERDICTS: list[tuple[int, bool, str]] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    VERDICTS.append((number, bool(ok), detail))
    assert ok, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")
