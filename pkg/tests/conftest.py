import numpy as np
import pytest

from enginefault.nn import Tensor


def numeric_grad(f, arrays, i, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(*arrays)
        x[idx] = orig - eps
        lo = f(*arrays)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    # analytically-zero gradients (e.g. the key bias under softmax shift
    # invariance) leave only round-off on both sides; compare absolutely
    if max(np.linalg.norm(a), np.linalg.norm(b)) < 1e-7:
        return float(np.linalg.norm(a - b))
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, *arrays, eps=1e-6, project=None):
    """Compare autodiff gradients of ``fn`` against finite differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are projected onto a
    fixed random direction. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays]).data
    if project is None:
        project = np.random.default_rng(1234).standard_normal(probe.shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * project).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward(np.broadcast_to(project, out.shape).copy())
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, arrays, i, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
