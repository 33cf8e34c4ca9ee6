"""Ranking metrics for entity alignment: MRR and Hits@k."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def normalize_rows(x):
    """Unit-norm rows; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def cosine_similarity(a, b):
    return normalize_rows(a) @ normalize_rows(b).T


@dataclass
class RankingResult:
    ranks: np.ndarray  # 1-based rank of the true counterpart per query

    @property
    def mrr(self):
        return float(np.mean(1.0 / self.ranks)) if len(self.ranks) else 0.0

    def hits(self, k):
        return float(np.mean(self.ranks <= k)) if len(self.ranks) else 0.0

    @property
    def hits1(self):
        return self.hits(1)

    @property
    def hits10(self):
        return self.hits(10)

    def as_dict(self):
        return {"mrr": self.mrr, "hits1": self.hits1, "hits10": self.hits10}


def ranks_from_similarity(sim, truth):
    """Rank of ``truth[i]`` in row i, descending; ties go to the lower column index."""
    sim = np.asarray(sim)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (sim.shape[0],):
        raise ShapeError(f"need one truth index per query row, got {truth.shape} for {sim.shape}")
    if len(truth) and (truth.min() < 0 or truth.max() >= sim.shape[1]):
        raise IndexError(f"truth index out of range for {sim.shape[1]} candidates")
    rows = np.arange(len(truth))
    target = sim[rows, truth][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > target) | ((sim == target) & (cols < truth[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_alignments(query_emb, candidate_emb, truth, bidirectional=False):
    """Cosine ranking of candidates for each query.

    ``truth[i]`` is the candidate row of query i's counterpart.  With
    ``bidirectional`` the reverse direction (candidates as queries) is
    ranked too and both rank lists are pooled, which averages the metrics.
    """
    sim = cosine_similarity(query_emb, candidate_emb)
    ranks = ranks_from_similarity(sim, truth)
    if bidirectional:
        truth = np.asarray(truth, dtype=np.int64)
        if len(np.unique(truth)) != len(truth) or len(truth) != sim.shape[1]:
            raise ValueError("bidirectional ranking needs a one-to-one truth mapping")
        inverse = np.empty(len(truth), dtype=np.int64)
        inverse[truth] = np.arange(len(truth))
        ranks = np.concatenate([ranks, ranks_from_similarity(sim.T, inverse)])
    return RankingResult(ranks)
