import sys

import numpy as np
import pytest

from deflect import tensor as T
from deflect.gradcheck import check_gradients
from deflect.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def max_grad_error(fn, *inputs: Tensor, seed: int = 0, h: float = 1e-5) -> float:
    """Largest relative error of d/dx sum(w * fn(x)) against central differences.

    A fixed random weighting ``w`` turns vector outputs into a scalar loss whose
    gradient exercises every output entry.
    """
    w = Tensor(np.random.default_rng(seed).normal(size=fn(*inputs).shape))
    params = {f"x{i}": t for i, t in enumerate(inputs)}
    reports = check_gradients(lambda: T.sum(fn(*inputs) * w), params, h=h)
    return max(r.max_rel_error for r in reports)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(acceptance.RESULTS):
        parts = acceptance.RESULTS[criterion]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}: {text}" for name, _, text in parts)
        terminalreporter.write_line(f"criterion {criterion:>2}: {verdict}  {detail}")
