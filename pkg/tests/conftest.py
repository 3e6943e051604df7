import numpy as np
import pytest

from nasb.autograd import Tensor, backward


def finite_difference(fn, arrays, h=1e-5):
    """Central differences of scalar fn(*arrays) w.r.t. each array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = fn(*arrays)
            a[idx] = old - h
            fm = fn(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, h=1e-5):
    """Max relative error between autograd and finite differences.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = backward(build(*leaves), wrt=leaves)
    numeric = finite_difference(value, arrays, h)
    return max(relative_error(grads[t], n) for t, n in zip(leaves, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")
