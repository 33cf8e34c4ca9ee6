"""Uni-modal encoders: two-layer multi-head GAT for structure, MLPs for the rest."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class GatLayer:
    """Multi-head graph attention with a diagonal transform per head.

    Head k scores neighbors with the full d-dimensional transformed features,
    ``a_k^T [w_k * h_i || w_k * h_j]``, and aggregates its own block of
    ``d / K`` columns; the K blocks are concatenated back to width d.
    """

    w_diag: list  # K tensors, 1 x d
    attn: list  # K tensors, 2d x 1
    slope: float = T.DEFAULT_LEAKY_SLOPE

    @classmethod
    def init(cls, rng, dim, heads, slope=T.DEFAULT_LEAKY_SLOPE):
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} is not divisible by {heads} heads")
        w = [Tensor(np.ones((1, dim)), requires_grad=True) for _ in range(heads)]
        a = [Tensor(glorot(rng, 2 * dim, 1), requires_grad=True) for _ in range(heads)]
        return cls(w, a, slope)

    @property
    def heads(self):
        return len(self.w_diag)

    @property
    def dim(self):
        return self.w_diag[0].cols

    def parameters(self, prefix):
        out = {}
        for k in range(self.heads):
            out[f"{prefix}.head{k}.w_diag"] = self.w_diag[k]
            out[f"{prefix}.head{k}.attn"] = self.attn[k]
        return out

    def attention(self, h, adjacency, head):
        """Row-stochastic attention matrix of one head (zero off the neighborhood)."""
        d = self.dim
        wh = h * self.w_diag[head]
        a = self.attn[head]
        src = wh @ T.take_rows(a, np.arange(d))
        dst = wh @ T.take_rows(a, np.arange(d, 2 * d))
        scores = T.leaky_relu(src + dst.T, self.slope)
        return T.rowwise_softmax(scores, mask=adjacency), wh


def gat_forward(layer, h, adjacency):
    """One GAT layer over a dense boolean adjacency that includes self-loops."""
    adjacency = np.asarray(adjacency, dtype=bool)
    n = h.rows
    if adjacency.shape != (n, n):
        raise ShapeError(f"adjacency {adjacency.shape} does not match {n} entities")
    if h.cols != layer.dim:
        raise ShapeError(f"GAT layer expects width {layer.dim}, got {h.cols}")
    if not adjacency.diagonal().all():
        raise ValueError("adjacency must contain a self-loop for every entity")
    block = layer.dim // layer.heads
    outs = []
    for k in range(layer.heads):
        alpha, wh = layer.attention(h, adjacency, k)
        msg = T.take_cols(wh, k * block, (k + 1) * block)
        outs.append(T.relu(alpha @ msg))
    return T.concat(outs, axis=1)


@dataclass
class MLP:
    """Linear -> ReLU -> Linear."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, in_dim, hidden, out_dim):
        return cls(
            Tensor(glorot(rng, in_dim, hidden), requires_grad=True),
            Tensor(np.zeros((1, hidden)), requires_grad=True),
            Tensor(glorot(rng, hidden, out_dim), requires_grad=True),
            Tensor(np.zeros((1, out_dim)), requires_grad=True),
        )

    @property
    def in_dim(self):
        return self.w1.rows

    def __call__(self, x):
        if x.cols != self.in_dim:
            raise ShapeError(f"MLP expects {self.in_dim} input columns, got {x.cols}")
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class ModalEmbeddings:
    s: Tensor
    r: Tensor
    a: Tensor
    v: Tensor

    def __getitem__(self, key):
        return getattr(self, key)

    def as_dict(self):
        return {"s": self.s, "r": self.r, "a": self.a, "v": self.v}


@dataclass
class ModalEncoderSet:
    entity_init: Tensor
    gat_layers: list
    mlp_r: MLP
    mlp_a: MLP
    mlp_v: MLP
    attr_edges: bool = False

    @classmethod
    def init(cls, rng, n, dim, relation_vocab, attribute_vocab, visual_dim,
             heads=2, hidden=None, slope=T.DEFAULT_LEAKY_SLOPE, attr_edges=False):
        hidden = hidden or dim
        return cls(
            entity_init=Tensor(glorot(rng, n, dim), requires_grad=True),
            gat_layers=[GatLayer.init(rng, dim, heads, slope) for _ in range(2)],
            mlp_r=MLP.init(rng, relation_vocab, hidden, dim),
            mlp_a=MLP.init(rng, attribute_vocab, hidden, dim),
            mlp_v=MLP.init(rng, visual_dim, hidden, dim),
            attr_edges=attr_edges,
        )

    @property
    def dim(self):
        return self.entity_init.cols

    def parameters(self):
        params = {"enc.entity_init": self.entity_init}
        for i, layer in enumerate(self.gat_layers):
            params.update(layer.parameters(f"enc.gat{i}"))
        params.update(self.mlp_r.parameters("enc.mlp_r"))
        params.update(self.mlp_a.parameters("enc.mlp_a"))
        params.update(self.mlp_v.parameters("enc.mlp_v"))
        return params


def encode_all(kg, enc, adjacency=None):
    """H^s from the GAT stack, H^r/H^a from bag-of-words MLPs, H^v from visual features.

    Rows of H^v for entities without an image are zero.
    """
    if kg.n != enc.entity_init.rows:
        raise ShapeError(f"encoder has {enc.entity_init.rows} entity rows, graph has {kg.n}")
    for name, mlp, width in (("relation", enc.mlp_r, kg.relation_bow.shape[1]),
                             ("attribute", enc.mlp_a, kg.attribute_bow.shape[1]),
                             ("visual", enc.mlp_v, kg.visual_dim)):
        if mlp.in_dim != width:
            raise ShapeError(f"{name} encoder expects {mlp.in_dim} inputs, graph provides {width}")
    if adjacency is None:
        adjacency = kg.adjacency(enc.attr_edges)
    h = enc.entity_init
    for layer in enc.gat_layers:
        h = gat_forward(layer, h, adjacency)
    present = Tensor(kg.has_image.astype(np.float64).reshape(-1, 1))
    return ModalEmbeddings(
        s=h,
        r=enc.mlp_r(Tensor._wrap(kg.relation_bow.astype(np.float64))),
        a=enc.mlp_a(Tensor._wrap(kg.attribute_bow.astype(np.float64))),
        v=enc.mlp_v(Tensor._wrap(kg.visual_features)) * present,
    )
