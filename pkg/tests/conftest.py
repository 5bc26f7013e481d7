import numpy as np
import pytest

from convernet import autodiff as ad

FD_STEP = 1e-5


def rel_error(a, b):
    """Norm-wise relative difference, guarded for all-zero gradients."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, arr, step=FD_STEP, after=None):
    """Central differences of scalar ``fn()`` with respect to ``arr`` (mutated in place, then restored)."""
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        hi = float(fn().data)
        if after:
            after()
        arr[idx] = old - step
        lo = float(fn().data)
        if after:
            after()
        arr[idx] = old
        out[idx] = (hi - lo) / (2 * step)
    return out


def gradcheck(fn, params, step=FD_STEP, after=None):
    """Largest per-parameter relative error between tape gradients and central differences.

    ``fn`` builds a scalar Value from ``params``; ``after`` undoes side effects
    (batch-norm running statistics) between evaluations.
    """
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    if after:
        after()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, rel_error(a, numeric_grad(fn, p.data, step, after)))
    return worst


def projection(shape, seed=99):
    """Fixed random weights turning a tensor output into a scalar loss."""
    return np.random.default_rng(seed).normal(size=shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def record(name, ok, detail):
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
