import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special as sp, stats

from mimea import pmf
from mimea import tensor as T
from mimea.encoders import ModalEmbeddings
from mimea.errors import ConfigError, DomainError
from mimea.tensor import Tape, Tensor

from conftest import assert_gradients_match


def quad_kl(p, q, lo, hi, points=None):
    def integrand(x):
        lp = p.logpdf(x)
        dens = math.exp(lp) if np.isfinite(lp) else 0.0
        return dens * (lp - q.logpdf(x)) if dens > 0 else 0.0
    val, _ = integrate.quad(integrand, lo, hi, points=points, limit=500, epsabs=1e-12, epsrel=1e-11)
    return val


def beta_kl_quadrature(a1, b1, a2, b2):
    """Tanh-sinh quadrature at 25 digits; copes with the endpoint singularities."""
    with mpmath.workdps(25):
        A1, B1, A2, B2 = map(mpmath.mpf, (a1, b1, a2, b2))
        lb1, lb2 = mpmath.log(mpmath.beta(A1, B1)), mpmath.log(mpmath.beta(A2, B2))

        def integrand(x):
            lp = (A1 - 1) * mpmath.log(x) + (B1 - 1) * mpmath.log(1 - x) - lb1
            lq = (A2 - 1) * mpmath.log(x) + (B2 - 1) * mpmath.log(1 - x) - lb2
            return mpmath.exp(lp) * (lp - lq)
        return float(mpmath.quad(integrand, [0, 0.5, 1]))


def test_beta_kl_spot_value():
    assert pmf.beta_kl((2.0, 2.0), (1.0, 1.0)) == pytest.approx(beta_kl_quadrature(2, 2, 1, 1), abs=1e-9)
    assert pmf.beta_kl((2.0, 2.0), (1.0, 1.0)) == pytest.approx(0.12509280256138666, abs=1e-9)


def test_beta_kl_matches_quadrature_on_random_pairs():
    rng = np.random.default_rng(11)
    for a1, b1, a2, b2 in rng.uniform(0.2, 20.0, size=(50, 4)):
        assert pmf.beta_kl((a1, b1), (a2, b2)) == pytest.approx(
            beta_kl_quadrature(a1, b1, a2, b2), abs=1e-6)


def test_beta_kl_self_zero_and_asymmetric():
    rng = np.random.default_rng(0)
    for a, b in rng.uniform(0.2, 20.0, size=(20, 2)):
        assert abs(pmf.beta_kl((a, b), (a, b))) <= 1e-12
    assert pmf.beta_kl((2, 5), (5, 2)) == pytest.approx(pmf.beta_kl((5, 2), (2, 5)))  # mirror pair
    assert pmf.beta_kl((2, 5), (3, 1)) != pytest.approx(pmf.beta_kl((3, 1), (2, 5)))


@settings(max_examples=300, deadline=None)
@given(*[st.floats(0.05, 50.0) for _ in range(4)])
def test_beta_kl_nonnegative(a1, b1, a2, b2):
    assert pmf.beta_kl((a1, b1), (a2, b2)) >= -1e-12


def test_beta_kl_domain_error():
    with pytest.raises(DomainError):
        pmf.beta_kl((0.0, 1.0), (1.0, 1.0))


def family_oracle(name, p, q):
    if name == "gamma":
        return quad_kl(stats.gamma(p[0], scale=1 / p[1]), stats.gamma(q[0], scale=1 / q[1]), 0, np.inf)
    if name == "laplace":
        a, b = stats.laplace(p[0], p[1]), stats.laplace(q[0], q[1])
        return quad_kl(a, b, -80, 80, points=sorted({p[0], q[0]}))
    if name == "gumbel":
        return quad_kl(stats.gumbel_r(p[0], p[1]), stats.gumbel_r(q[0], q[1]), -np.inf, np.inf)
    if name == "cauchy":
        return quad_kl(stats.cauchy(p[0], p[1]), stats.cauchy(q[0], q[1]), -np.inf, np.inf)
    raise AssertionError(name)


@pytest.mark.parametrize("name", ["gamma", "laplace", "gumbel", "cauchy"])
def test_family_kl_matches_quadrature(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        if name == "gamma":
            p, q = tuple(rng.uniform(0.5, 5, 2)), tuple(rng.uniform(0.5, 5, 2))
        else:
            p = (rng.uniform(-2, 2), rng.uniform(0.5, 3))
            q = (rng.uniform(-2, 2), rng.uniform(0.5, 3))
        assert pmf.family_kl(name, p, q) == pytest.approx(family_oracle(name, p, q), abs=1e-5)


@pytest.mark.parametrize("name", sorted(pmf.FAMILIES))
def test_family_self_divergence_zero(name):
    assert abs(pmf.family_kl(name, (1.3, 0.7), (1.3, 0.7))) < 1e-12


def test_unknown_family():
    with pytest.raises(ConfigError):
        pmf.get_family("weibull")


def test_to_beta_examples():
    bp = pmf.to_beta(Tensor(np.zeros((2, 4))))
    np.testing.assert_allclose(bp.alpha.data, math.log(2) + 1e-4, atol=1e-15)
    np.testing.assert_allclose(bp.beta.data, math.log(2) + 1e-4, atol=1e-15)
    # softplus(20) is 20 to within 1e-6; the positivity floor sits on top
    alpha = pmf.to_beta(Tensor([[20.0, 0.0]])).alpha.data[0, 0]
    assert alpha - pmf.POSITIVE_FLOOR == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(ConfigError):
        pmf.to_beta(Tensor(np.zeros((1, 3))))


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(1e-3, 5))
def test_to_beta_monotone(x, step):
    a = pmf.to_beta(Tensor([[x, 0.0]])).alpha.data[0, 0]
    b = pmf.to_beta(Tensor([[x + step, 0.0]])).alpha.data[0, 0]
    assert b > a


def test_modal_weight_examples():
    assert pmf.modal_weight(0.0, 0.1) == pytest.approx(0.4)
    assert pmf.modal_weight(2.0, 0.1) == 0.0
    assert pmf.modal_weight(2.0, 7.0) == 0.0


def embeds_from(rng, n, d):
    return ModalEmbeddings(*(Tensor(rng.normal(size=(n, d)), requires_grad=True) for _ in range(4)))


def test_identical_embeddings_give_uniform_softmax():
    x = np.random.default_rng(0).normal(size=(5, 6))
    e = ModalEmbeddings(*(Tensor(x) for _ in range(4)))
    Hm, info = pmf.fuse(e)
    assert Hm.shape == (5, 24)
    np.testing.assert_allclose(info.softmax, 1 / 3, atol=1e-12)
    assert info.coefficients["s"] == 1.0
    assert all(v == 0.0 for v in info.deltas.values())


def straight_line_fuse(E, lam):
    """to_beta -> per-dimension KL -> mean clamp -> weight -> softmax -> scale -> concat."""
    def params(H):
        m = H.shape[1] // 2
        return np.logaddexp(0, H[:, :m]) + 1e-4, np.logaddexp(0, H[:, m:]) + 1e-4

    a2, b2 = params(E["s"])
    w = []
    for k in "rav":
        a1, b1 = params(E[k])
        kl = (sp.betaln(a2, b2) - sp.betaln(a1, b1) + (a1 - a2) * sp.digamma(a1)
              + (b1 - b2) * sp.digamma(b1) + (a2 - a1 + b2 - b1) * sp.digamma(a1 + b1))
        delta = min(max(kl.mean(), 0.0), 2.0)
        w.append(lam * (2 - delta) ** 2)
    z = np.exp(np.array(w) + 1.0)
    soft = z / z.sum()
    return np.concatenate([E["s"]] + [c * E[k] for c, k in zip(soft, "rav")], axis=1), soft


def test_fuse_matches_straight_line_recomputation():
    rng = np.random.default_rng(6)
    E = {k: rng.normal(size=(6, 8)) * 0.5 for k in "srav"}
    want, soft = straight_line_fuse(E, 0.1)
    Hm, info = pmf.fuse(ModalEmbeddings(*(Tensor(E[k]) for k in "srav")), lam=0.1)
    np.testing.assert_allclose(Hm.data, want, atol=1e-10)
    np.testing.assert_allclose(info.softmax, soft, atol=1e-12)
    assert info.softmax.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=3, max_size=3), st.integers(0, 2), st.floats(0.01, 3))
def test_softmax_share_monotone(w, i, bump):
    def soft(ws):
        return T.rowwise_softmax(Tensor([ws]) + 1.0).data[0]
    raised = list(w)
    raised[i] += bump
    assert soft(raised)[i] >= soft(w)[i]
    assert soft(w).sum() == pytest.approx(1.0, abs=1e-12)


def test_ablated_modality_gets_zero_block():
    rng = np.random.default_rng(2)
    e = embeds_from(rng, 4, 6)
    Hm, info = pmf.fuse(e, modalities=("s", "r", "a"))
    assert info.coefficients["v"] == 0.0
    assert not Hm.data[:, 18:].any()
    assert sum(info.coefficients[k] for k in "ra") == pytest.approx(1.0)


def test_pivot_selection_and_fallback():
    rng = np.random.default_rng(3)
    e = embeds_from(rng, 4, 6)
    _, info = pmf.fuse(e, pivot="visual")
    assert info.pivot == "v" and info.coefficients["v"] == 1.0
    _, info = pmf.fuse(e, pivot="s", modalities=("r", "a", "v"))
    assert info.pivot == "r" and info.coefficients["s"] == 0.0
    with pytest.raises(ConfigError):
        pmf.fuse(e, pivot="text")


@pytest.mark.parametrize("name", sorted(pmf.FAMILIES))
@pytest.mark.parametrize("agg", ["mean_clamped", "raw_sum"])
def test_every_family_fuses(name, agg):
    rng = np.random.default_rng(4)
    Hm, info = pmf.fuse(embeds_from(rng, 5, 6), distribution=name, kl_agg=agg)
    assert np.all(np.isfinite(Hm.data))
    assert info.softmax.sum() == pytest.approx(1.0, abs=1e-12)


def test_detached_weights_block_kl_gradient():
    rng = np.random.default_rng(5)
    e = embeds_from(rng, 4, 6)
    probe = Tensor(rng.normal(size=(4, 24)))

    def loss(detach):
        with Tape() as tape:
            Hm, _ = pmf.fuse(e, detach_weights=detach)
            out = T.tsum(Hm * probe)
        return tape.backward(out)

    # with detached weights the structural block is a plain copy
    np.testing.assert_allclose(loss(True)[e.s], probe.data[:, :6], atol=1e-15)
    assert not np.allclose(loss(False)[e.s], probe.data[:, :6])


@pytest.mark.parametrize("name", sorted(pmf.FAMILIES))
def test_full_differentiation_through_weights(name):
    rng = np.random.default_rng(8)
    e = embeds_from(rng, 3, 4)
    for t in e.as_dict().values():
        t.data *= 0.3
    probe = Tensor(rng.normal(size=(3, 16)))
    fn = lambda: T.tsum(pmf.fuse(e, detach_weights=False, distribution=name)[0] * probe)
    assert_gradients_match(fn, list(e.as_dict().values()))
