import numpy as np
import pytest

from rescycle.autodiff import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def gradcheck(build, tensors, rng, h=1e-6):
    """Compare backward() against central differences for ``sum(build() * R)``.

    Returns the worst relative error over all ``tensors``.
    """
    out = build()
    weights = rng.normal(size=out.shape)

    def scalar():
        return float(np.sum(build().data * weights))

    for t in tensors:
        t.grad = None
    loss = (build() * Tensor(weights, dtype=np.float64)).sum()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_grad(scalar, [t.data for t in tensors], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)
