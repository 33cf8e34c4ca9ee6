"""Probability-guided modal fusion.

Each n x d embedding is split column-wise into two n x d/2 halves that
parameterize d/2 distributions per entity.  The divergence of a modality
from the pivot modality becomes a weight ``lam * (2 - delta)^2``; the
non-pivot weights go through ``softmax(w + 1.0)`` and scale their blocks of
the fused n x 4d embedding.  The pivot block keeps coefficient 1.0.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor

MODALITIES = ("s", "r", "a", "v")
MODALITY_NAMES = {"structural": "s", "relation": "r", "attribute": "a", "visual": "v"}
POSITIVE_FLOOR = 1e-4
EULER_GAMMA = 0.57721566490153286


def modality_key(name):
    if name in MODALITIES:
        return name
    try:
        return MODALITY_NAMES[name]
    except KeyError:
        raise ConfigError(f"unknown modality {name!r}") from None


def _positive(x):
    return T.softplus(x) + POSITIVE_FLOOR


def _halves(H):
    if H.cols % 2:
        raise ConfigError(f"embedding width must be even to split into two halves, got {H.cols}")
    m = H.cols // 2
    return T.take_cols(H, 0, m), T.take_cols(H, m, 2 * m)


@dataclass
class BetaParams:
    alpha: Tensor
    beta: Tensor


def to_beta(H):
    """alpha = softplus(first half) + 1e-4, beta = softplus(second half) + 1e-4."""
    first, second = _halves(H)
    return BetaParams(_positive(first), _positive(second))


def _lbeta(a, b):
    return T.lgamma(a) + T.lgamma(b) - T.lgamma(a + b)


def _beta_kl(p, q):
    a1, b1 = p
    a2, b2 = q
    return (_lbeta(a2, b2) - _lbeta(a1, b1)
            + (a1 - a2) * T.digamma(a1)
            + (b1 - b2) * T.digamma(b1)
            + (a2 - a1 + b2 - b1) * T.digamma(a1 + b1))


def _gamma_kl(p, q):
    # shape k, rate r
    k1, r1 = p
    k2, r2 = q
    return ((k1 - k2) * T.digamma(k1) - T.lgamma(k1) + T.lgamma(k2)
            + k2 * (T.log(r1) - T.log(r2)) + k1 * (r2 - r1) / r1)


def _laplace_kl(p, q):
    m1, b1 = p
    m2, b2 = q
    gap = T.tabs(m1 - m2)
    return T.log(b2) - T.log(b1) + gap / b2 + (b1 / b2) * T.exp(-(gap / b1)) - 1.0


def _gumbel_kl(p, q):
    m1, s1 = p
    m2, s2 = q
    ratio = s1 / s2
    # exponent capped to keep the value finite for degenerate scales
    tail = T.exp(T.clip((m2 - m1) / s2, -700.0, 50.0) + T.lgamma(ratio + 1.0))
    return (T.log(s2) - T.log(s1) + (m1 - m2) / s2
            + EULER_GAMMA * (ratio - 1.0) + tail - 1.0)


def _cauchy_kl(p, q):
    x1, g1 = p
    x2, g2 = q
    top = (g1 + g2) * (g1 + g2) + (x1 - x2) * (x1 - x2)
    return T.log(top / (4.0 * g1 * g2))


@dataclass(frozen=True)
class Family:
    name: str
    location_first: bool  # first half is an unconstrained location
    kl_fn: object

    def params(self, H):
        first, second = _halves(H)
        lead = first if self.location_first else _positive(first)
        return lead, _positive(second)

    def kl(self, p, q):
        """Elementwise KL(p || q) for parameter pairs of equal shape."""
        return self.kl_fn(p, q)


FAMILIES = {
    "beta": Family("beta", False, _beta_kl),
    "gamma": Family("gamma", False, _gamma_kl),
    "cauchy": Family("cauchy", True, _cauchy_kl),
    "gumbel": Family("gumbel", True, _gumbel_kl),
    "laplace": Family("laplace", True, _laplace_kl),
}


def get_family(name):
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown distribution {name!r}; choose from {sorted(FAMILIES)}") from None


def family_kl(name, p, q):
    """Scalar KL(p || q) for a named family; p and q are parameter pairs."""
    fam = get_family(name)
    scales = [p[1], q[1]] if fam.location_first else [*p, *q]
    if any(not s > 0 for s in scales):
        raise DomainError(f"{name} KL needs positive shape/scale parameters, got p={p}, q={q}")
    with T.no_grad():
        out = fam.kl(tuple(Tensor(v) for v in p), tuple(Tensor(v) for v in q))
    return out.item()


def beta_kl(p, q):
    """KL(Beta(p) || Beta(q)) in closed form; p and q are (alpha, beta) pairs."""
    return family_kl("beta", p, q)


def modal_weight(delta, lam):
    """lam * (2 - delta)^2."""
    return lam * (2.0 - delta) * (2.0 - delta)


def aggregate_kl(kl, how):
    """Collapse an n x m per-entity, per-dimension KL matrix to one scalar.

    ``mean_clamped``: mean over every entry, clamped to [0, 2].
    ``raw_sum``: sum over dimensions, averaged over entities.
    """
    if how == "mean_clamped":
        return T.clip(T.mean(kl), 0.0, 2.0)
    if how == "raw_sum":
        return T.mean(T.tsum(kl, axis=1))
    raise ConfigError(f"unknown kl aggregation {how!r}")


@dataclass
class FusionWeights:
    pivot: str
    deltas: dict  # modality -> aggregated divergence from the pivot
    raw: dict  # modality -> lam * (2 - delta)^2
    coefficients: dict  # modality -> multiplier on its block of H^m

    @property
    def softmax(self):
        return np.array([self.coefficients[k] for k in MODALITIES
                         if k in self.raw])

    def as_dict(self):
        return {"pivot": self.pivot, "deltas": dict(self.deltas),
                "raw": dict(self.raw), "coefficients": dict(self.coefficients)}


def fuse(embeds, lam=0.1, detach_weights=True, pivot="s", distribution="beta",
         kl_agg="mean_clamped", modalities=MODALITIES, coefficients=None):
    """Fuse uni-modal embeddings into H^m = [c_s H^s || c_r H^r || c_a H^a || c_v H^v].

    Returns (H^m, FusionWeights).  Modalities missing from ``modalities`` get
    coefficient 0.  If the pivot itself is missing, the first remaining
    modality in s, r, a, v order takes its place.

    ``coefficients`` (modality -> float) skips the divergence computation
    and uses the given block multipliers as constants.
    """
    present = [k for k in MODALITIES if k in {modality_key(m) for m in modalities}]
    if not present:
        raise ConfigError("at least one modality is required")
    pivot = modality_key(pivot)
    if pivot not in present:
        pivot = present[0]
    shapes = {embeds[k].shape for k in MODALITIES}
    if len(shapes) != 1:
        raise ShapeError(f"modal embeddings differ in shape: {sorted(shapes)}")
    n, d = embeds.s.shape
    fam = get_family(distribution)

    others = [k for k in present if k != pivot]
    deltas, raw, coef = {}, {}, {pivot: Tensor(1.0)}
    if coefficients is not None:
        coef = {k: Tensor(float(coefficients[k])) for k in present}
    elif others:
        def weights():
            src = {k: (embeds[k].detach() if detach_weights else embeds[k]) for k in [pivot] + others}
            q = fam.params(src[pivot])
            ws = []
            for k in others:
                delta = aggregate_kl(fam.kl(fam.params(src[k]), q), kl_agg)
                deltas[k] = delta.item()
                ws.append(modal_weight(delta, lam))
            return T.rowwise_softmax(T.concat(ws, axis=1) + 1.0), ws

        if detach_weights:
            with T.no_grad():
                soft, ws = weights()
        else:
            soft, ws = weights()
        for i, k in enumerate(others):
            raw[k] = ws[i].item()
            coef[k] = T.take_cols(soft, i, i + 1)

    blocks = []
    for k in MODALITIES:
        if k in coef:
            blocks.append(embeds[k] * coef[k])
        else:
            blocks.append(Tensor(np.zeros((n, d))))
    info = FusionWeights(pivot, deltas, raw, {k: (coef[k].item() if k in coef else 0.0) for k in MODALITIES})
    return T.concat(blocks, axis=1), info
