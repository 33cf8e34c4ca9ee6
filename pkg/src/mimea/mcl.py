"""Per-modality bidirectional contrastive losses and uncertainty weighting."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LOSS_KEYS = ("s", "r", "a", "v", "m")
NORM_EPS = 1e-12


@dataclass
class ContrastiveBatch:
    """Row i of ``left`` and row i of ``right`` are the i-th aligned pair."""

    left: Tensor
    right: Tensor
    tau: float = 0.1
    gamma: float = 0.8

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ShapeError(f"batch sides differ: {self.left.shape} vs {self.right.shape}")
        if self.left.rows < 2:
            raise ValueError("a contrastive batch needs at least two pairs")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"inner-graph weight must be nonnegative, got {self.gamma}")


def modal_loss_dir(anchor, other, tau=0.1, gamma=0.8):
    """Mean over anchors i of -log(pos / (pos + gamma * inner + cross)).

    pos = exp(<a_i, o_i>/tau); inner sums exp(<a_i, a_j>/tau) and cross sums
    exp(<a_i, o_j>/tau) over j != i.  Rows are L2-normalized first.
    """
    b = anchor.rows
    if b < 2:
        raise ValueError("a contrastive batch needs at least two pairs")
    za = T.l2_normalize_rows(anchor, NORM_EPS)
    zo = T.l2_normalize_rows(other, NORM_EPS)
    cross = (za @ zo.T) * (1.0 / tau)
    inner = (za @ za.T) * (1.0 / tau)
    off_diag = 1.0 - np.eye(b)
    weights = np.concatenate([np.ones((b, b)), gamma * off_diag], axis=1)
    if gamma == 0:
        # drop the zero-weight block so it cannot influence the max shift
        logits, weights = cross, weights[:, :b]
    else:
        logits = T.concat([cross, inner], axis=1)
    denom = T.weighted_logsumexp(logits, weights)
    pos = T.tsum(za * zo, axis=1) * (1.0 / tau)
    return T.mean(denom - pos)


def modal_loss(batch):
    """Average of the two directions."""
    fwd = modal_loss_dir(batch.left, batch.right, batch.tau, batch.gamma)
    bwd = modal_loss_dir(batch.right, batch.left, batch.tau, batch.gamma)
    return (fwd + bwd) * 0.5


@dataclass
class UncertaintyWeights:
    """Learnable log-variances s_l, one per loss term (1 x 5, order s r a v m)."""

    log_var: Tensor

    @classmethod
    def init(cls):
        return cls(Tensor(np.zeros((1, len(LOSS_KEYS))), requires_grad=True))

    def value(self, key):
        return float(self.log_var.data[0, LOSS_KEYS.index(key)])

    def parameters(self):
        return {"mcl.log_var": self.log_var}


def total_loss(losses, weights):
    """sum_l exp(-s_l) * L_l + s_l over l in (s, r, a, v, m).

    A missing or ``None`` loss is an ablated modality: it contributes the
    constant s_l and no gradient.
    """
    total = None
    for i, key in enumerate(LOSS_KEYS):
        loss = losses.get(key)
        if loss is None:
            term = Tensor(weights.log_var.data[0, i])
        else:
            s = T.take_cols(weights.log_var, i, i + 1)
            term = T.exp(-s) * loss + s
        total = term if total is None else total + term
    return total
