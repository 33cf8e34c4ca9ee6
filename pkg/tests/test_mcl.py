import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mimea import tensor as T
from mimea.mcl import (LOSS_KEYS, ContrastiveBatch, UncertaintyWeights, modal_loss,
                       modal_loss_dir, total_loss)
from mimea.tensor import Tape, Tensor

from conftest import assert_gradients_match


def brute_force_dir(A, B, tau, gamma):
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(A)):
        pos = math.exp(A[i] @ B[i] / tau)
        inner = sum(math.exp(A[i] @ A[j] / tau) for j in range(len(A)) if j != i)
        cross = sum(math.exp(A[i] @ B[j] / tau) for j in range(len(A)) if j != i)
        total += -math.log(pos / (pos + gamma * inner + cross))
    return total / len(A)


def test_two_pair_closed_form():
    e = Tensor(np.eye(2))
    loss = modal_loss(ContrastiveBatch(e, Tensor(np.eye(2)), tau=1.0, gamma=0.0)).item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-9)


@pytest.mark.parametrize("tau,gamma", [(0.1, 0.8), (1.0, 0.0), (0.5, 2.0), (0.05, 0.3)])
def test_matches_brute_force(tau, gamma):
    rng = np.random.default_rng(int(tau * 100 + gamma * 10))
    A, B = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    got = modal_loss_dir(Tensor(A), Tensor(B), tau, gamma).item()
    assert got == pytest.approx(brute_force_dir(A, B, tau, gamma), rel=1e-12)


def test_gamma_zero_is_smaller_when_inner_similarities_positive():
    rng = np.random.default_rng(0)
    A = np.abs(rng.normal(size=(5, 4)))  # positive orthant: all inner cosines > 0
    B = np.abs(rng.normal(size=(5, 4)))
    lo = modal_loss_dir(Tensor(A), Tensor(B), 0.1, 0.0).item()
    hi = modal_loss_dir(Tensor(A), Tensor(B), 0.1, 0.8).item()
    assert lo < hi


batches = arrays(np.float64, st.tuples(st.integers(2, 6), st.just(4)), elements=st.floats(-5, 5))


@settings(max_examples=100, deadline=None)
@given(batches, st.floats(0.05, 2.0), st.floats(0.0, 2.0), st.integers(0, 1000))
def test_nonnegative_finite_and_symmetric(A, tau, gamma, seed):
    A = A + np.random.default_rng(seed).normal(size=A.shape) * 1e-3  # avoid zero rows
    B = np.random.default_rng(seed + 1).normal(size=A.shape)
    ab = modal_loss(ContrastiveBatch(Tensor(A), Tensor(B), tau, gamma)).item()
    ba = modal_loss(ContrastiveBatch(Tensor(B), Tensor(A), tau, gamma)).item()
    assert ab >= 0 and np.isfinite(ab)
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-12)


def test_identical_graphs_directions_agree():
    A = np.random.default_rng(1).normal(size=(4, 3))
    fwd = modal_loss_dir(Tensor(A), Tensor(A), 0.1, 0.8).item()
    avg = modal_loss(ContrastiveBatch(Tensor(A), Tensor(A.copy()))).item()
    assert avg == pytest.approx(fwd, rel=1e-14)


def test_average_of_directions():
    rng = np.random.default_rng(2)
    A, B = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
    want = 0.5 * (modal_loss_dir(A, B).item() + modal_loss_dir(B, A).item())
    assert modal_loss(ContrastiveBatch(A, B)).item() == want


def test_lower_temperature_sharpens_separated_batch():
    A = np.eye(4) + 0.05
    B = np.eye(4) + 0.05
    sharp = modal_loss(ContrastiveBatch(Tensor(A), Tensor(B), tau=0.05)).item()
    soft = modal_loss(ContrastiveBatch(Tensor(A), Tensor(B), tau=0.5)).item()
    assert sharp < soft


def test_batch_validation():
    one = Tensor(np.ones((1, 3)))
    with pytest.raises(ValueError):
        ContrastiveBatch(one, one)
    with pytest.raises(ValueError):
        modal_loss_dir(one, one)
    two = Tensor(np.eye(2))
    with pytest.raises(ValueError):
        ContrastiveBatch(two, two, tau=0.0)
    with pytest.raises(ValueError):
        ContrastiveBatch(two, two, gamma=-0.1)
    with pytest.raises(ValueError):
        ContrastiveBatch(two, Tensor(np.eye(3)))


def test_loss_gradients():
    rng = np.random.default_rng(4)
    A = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    B = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    assert_gradients_match(lambda: modal_loss(ContrastiveBatch(A, B)), [A, B])


def test_total_loss_formula_and_derivative():
    rng = np.random.default_rng(5)
    u = UncertaintyWeights.init()
    losses = {k: Tensor(v) for k, v in zip(LOSS_KEYS, rng.uniform(0.1, 3, 5))}
    assert total_loss(losses, u).item() == pytest.approx(sum(l.item() for l in losses.values()), abs=1e-12)

    u.log_var.data[...] = rng.normal(size=(1, 5))
    s = u.log_var.data[0]
    vals = np.array([losses[k].item() for k in LOSS_KEYS])
    with Tape() as tape:
        out = total_loss(losses, u)
    assert out.item() == pytest.approx(float(np.sum(np.exp(-s) * vals + s)), abs=1e-12)
    np.testing.assert_allclose(tape.backward(out)[u.log_var][0], -np.exp(-s) * vals + 1, atol=1e-12)


def test_ablated_term_is_constant():
    u = UncertaintyWeights.init()
    u.log_var.data[...] = [[0.1, 0.2, 0.3, 0.4, 0.5]]
    x = Tensor([[2.0]], requires_grad=True)
    with Tape() as tape:
        out = total_loss({"s": x, "r": None, "a": x, "v": x, "m": x}, u)
    g = tape.backward(out)[u.log_var][0]
    assert g[1] == 0.0
    want = sum(math.exp(-s) * 2.0 + s for s in (0.1, 0.3, 0.4, 0.5)) + 0.2
    assert out.item() == pytest.approx(want, abs=1e-12)
