import numpy as np
import pytest

from cmtm.harness.gradcheck import central_difference, relative_error
from cmtm.tensor import Tensor, backward


class CountingRng:
    """Wraps a Generator and counts every method call made on it."""

    def __init__(self, seed=0):
        self._rng = np.random.default_rng(seed)
        self.calls = 0

    def __getattr__(self, name):
        self.calls += 1
        return getattr(self._rng, name)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def check_op_grad(fn, *arrays, step=1e-4):
    """Relative error of backprop vs float64 central differences for scalar ``sum(fn(*inputs) * w)``.

    Returns the worst error over all inputs.
    """
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    probe = np.random.default_rng(0).normal(size=np.shape(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data))

    def loss():
        out = fn(*inputs)
        return float(np.sum(out.data * probe))

    from cmtm import tensor as T

    out = fn(*inputs)
    backward(T.sum(T.mul(out, probe)))
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        numeric = central_difference(loss, t.data, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# (criterion, title, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
