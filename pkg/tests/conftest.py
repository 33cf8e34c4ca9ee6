import numpy as np
import pytest

from mimea.tensor import Tape


def central_difference(fn, tensors, h=1e-6):
    """Numerical gradient of the scalar ``fn()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            old = t.data[idx]
            t.data[idx] = old + h
            up = fn().item()
            t.data[idx] = old - h
            down = fn().item()
            t.data[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def tape_gradients(fn, tensors):
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    return [grads[t] for t in tensors]


def assert_gradients_match(fn, tensors, abs_tol=1e-4, rel_tol=1e-3, h=1e-6):
    analytic = tape_gradients(fn, tensors)
    numeric = central_difference(fn, tensors, h)
    for t, a, n in zip(tensors, analytic, numeric):
        bound = np.maximum(abs_tol, rel_tol * np.abs(n))
        bad = np.abs(a - n) > bound
        assert not bad.any(), (
            f"{t.name or 'tensor'}: max gap {np.abs(a - n).max():.3g} at "
            f"{np.argwhere(bad)[0].tolist()}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
