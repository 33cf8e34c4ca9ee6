"""The full alignment model: encoders, fusion, transport and contrastive losses."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import union
from .encoders import ModalEncoderSet, encode_all, glorot
from .evaluation import normalize_rows
from .mcl import ContrastiveBatch, UncertaintyWeights, modal_loss, total_loss
from .otma import otma_all
from .pmf import MODALITIES, fuse
from .tensor import Tensor


@dataclass
class ForwardState:
    """Values held fixed by ``MimeaModel.loss(..., frozen=state)``."""

    coefficients: dict
    plans: dict  # (side, modality) -> TransportPlan


class MimeaModel:
    """Parameters and forward pass over the disjoint union of two graphs.

    Entity i of the first graph is row i of the union; entity j of the
    second is row ``n1 + j``.
    """

    def __init__(self, kg1, kg2, cfg, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.n1, self.n2 = kg1.n, kg2.n
        self.graph = union(kg1, kg2)
        self.adjacency = self.graph.adjacency(cfg.attr_edges)
        self.has_image = self.graph.has_image
        self.encoders = ModalEncoderSet.init(
            rng, self.graph.n, cfg.dim, self.graph.relation_vocab_size,
            self.graph.attribute_vocab_size, self.graph.visual_dim,
            heads=cfg.heads, attr_edges=cfg.attr_edges)
        self.uncertainty = UncertaintyWeights.init()
        # fixed map from the fused width down to d for transport costs
        self.projection = Tensor(glorot(rng, 4 * cfg.dim, cfg.dim))

    @property
    def modalities(self):
        return self.cfg.mcl.modalities

    def parameters(self):
        params = dict(self.encoders.parameters())
        params.update(self.uncertainty.parameters())
        return params

    def state(self):
        """Every tensor that defines the model, trainable or not."""
        out = self.parameters()
        out["otma.projection"] = self.projection
        return out

    def load_state(self, arrays):
        state = self.state()
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in state.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data[...] = arr

    def embed(self, coefficients=None):
        embeds = encode_all(self.graph, self.encoders, self.adjacency)
        p = self.cfg.pmf
        Hm, info = fuse(embeds, lam=p.lam, detach_weights=p.detach_weights, pivot=p.pivot,
                        distribution=p.distribution, kl_agg=p.kl_agg,
                        modalities=self.modalities, coefficients=coefficients)
        return embeds, Hm, info

    def _side_inputs(self, embeds, Hm, rows, side, plans, new_plans):
        """Per-modality loss inputs for one side of the batch.

        ``rows`` are union row ids.  Visual rows are limited to ``vis_rows``.
        """
        o = self.cfg.otma
        out = {"s": T.take_rows(embeds.s, rows["all"]), "m": T.take_rows(Hm, rows["all"])}
        for k in ("r", "a", "v"):
            if k not in self.modalities:
                continue
            idx = rows["vis"] if k == "v" else rows["all"]
            if idx is None:
                continue
            H = T.take_rows(embeds[k], idx)
            if o.consume == "off":
                out[k] = H
                continue
            with T.no_grad():
                target = T.take_rows(Hm, idx)
            key = (side, k)
            old = None if plans is None else {k: plans[key]}
            P, made = otma_all({k: H}, target, self.projection.data, o.epsilon,
                               o.max_iters, o.tol, modalities=(k,), plans=old)
            new_plans[key] = made[k]
            out[k] = P[k] if o.consume == "replace" else (P[k] + H) * 0.5
        return out

    def loss(self, pairs, frozen=None):
        """Uncertainty-weighted total loss for a batch of (left, right) pairs.

        Returns (total, {modality: loss value or None}, ForwardState).
        Passing ``frozen`` reuses its fusion coefficients and transport plans.
        """
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        left = pairs[:, 0]
        right = pairs[:, 1] + self.n1
        vis = self.has_image[left] & self.has_image[right]
        embeds, Hm, info = self.embed(None if frozen is None else frozen.coefficients)
        plans = {}
        sides = {}
        for side, ids in (("left", left), ("right", right)):
            rows = {"all": ids, "vis": ids[vis] if vis.sum() >= 2 else None}
            sides[side] = self._side_inputs(embeds, Hm, rows, side,
                                            None if frozen is None else frozen.plans, plans)
        c = self.cfg.mcl
        losses = {}
        for k in ("s", "r", "a", "v", "m"):
            if k != "m" and k not in self.modalities:
                losses[k] = None
            elif k in sides["left"]:
                losses[k] = modal_loss(ContrastiveBatch(sides["left"][k], sides["right"][k],
                                                        c.tau, c.gamma))
            else:
                losses[k] = None
        total = total_loss(losses, self.uncertainty)
        state = ForwardState(dict(info.coefficients), plans)
        return total, {k: (None if v is None else v.item()) for k, v in losses.items()}, state

    def eval_embeddings(self):
        """Similarity-space rows for both graphs: normalized blocks concatenated."""
        with T.no_grad():
            embeds, Hm, _ = self.embed()
        blocks = [normalize_rows(embeds[k].data) for k in MODALITIES if k in self.modalities]
        blocks.append(normalize_rows(Hm.data))
        full = np.concatenate(blocks, axis=1)
        return full[:self.n1], full[self.n1:]
