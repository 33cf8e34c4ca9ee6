"""Training loop with probation-based pseudo-labeling."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .evaluation import normalize_rows, rank_alignments
from .model import MimeaModel
from .optim import make_optimizer
from .tensor import Tape

log = logging.getLogger("mimea.trainer")


def mutual_nn_pairs(emb1, emb2, excluded=((), ())):
    """Pairs (i, j) that are each other's cosine nearest neighbour.

    ``excluded`` is (rows of emb1, rows of emb2) already aligned; they are
    removed before the argmax.  Ties go to the lowest index.
    """
    ex1, ex2 = (set(map(int, e)) for e in excluded)
    left = np.array([i for i in range(len(emb1)) if i not in ex1], dtype=np.int64)
    right = np.array([j for j in range(len(emb2)) if j not in ex2], dtype=np.int64)
    if not len(left) or not len(right):
        return []
    sim = normalize_rows(emb1[left]) @ normalize_rows(emb2[right]).T
    best_r = sim.argmax(axis=1)  # argmax returns the first maximum
    best_l = sim.argmax(axis=0)
    return [(int(left[a]), int(right[b])) for a, b in enumerate(best_r) if best_l[b] == a]


@dataclass
class ProbationBuffer:
    """Candidate pairs with the epoch they were first seen, continuously."""

    span: int
    entries: dict = field(default_factory=dict)

    def update(self, candidates, epoch):
        """Evict lapsed pairs, admit new ones, return the pairs due for promotion."""
        current = set(candidates)
        for pair in list(self.entries):
            if pair not in current:
                del self.entries[pair]
        for pair in candidates:
            self.entries.setdefault(pair, epoch)
        due = sorted(p for p, first in self.entries.items() if epoch - first >= self.span)
        for p in due:
            del self.entries[p]
        return due

    def __len__(self):
        return len(self.entries)


@dataclass
class TrainResult:
    model: MimeaModel
    history: list
    train_pairs: list
    buffer: ProbationBuffer
    stopped_epoch: int


def evaluate(model, pairs, bidirectional=False):
    """Rank each pair's right entity among all right entities of ``pairs``."""
    if not pairs:
        return None
    e1, e2 = model.eval_embeddings()
    pairs = np.asarray(pairs, dtype=np.int64)
    return rank_alignments(e1[pairs[:, 0]], e2[pairs[:, 1]], np.arange(len(pairs)),
                           bidirectional=bidirectional)


def _batches(order, size):
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _state_dump(epoch, losses, model):
    return {
        "epoch": epoch,
        "losses": losses,
        "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in model.parameters().items()},
        "nonfinite_params": sorted(k for k, t in model.parameters().items()
                                   if not np.all(np.isfinite(t.data))),
    }


def train(kg1, kg2, seeds, cfg, log_path=None, on_epoch=None):
    """Fit a model on ``seeds.train_pairs`` and track ranking on ``seeds.test_pairs``.

    Deterministic for a given config.  Writes one JSON object per epoch to
    ``log_path`` when given.
    """
    cfg.validate()
    if len(seeds.train_pairs) < 2:
        raise ConfigError("training needs at least two seed pairs")
    rng = np.random.default_rng(cfg.seed)
    model = MimeaModel(kg1, kg2, cfg, rng)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, weight_decay=cfg.weight_decay)

    train_pairs = list(seeds.train_pairs)
    val_pairs = []
    if cfg.patience:
        n_val = max(1, len(train_pairs) // 10)
        order = rng.permutation(len(train_pairs))
        val_pairs = [train_pairs[i] for i in order[:n_val]]
        train_pairs = [train_pairs[i] for i in order[n_val:]]
        if len(train_pairs) < 2:
            raise ConfigError("too few seed pairs to hold out a validation split")
    test_pairs = list(seeds.test_pairs)
    buffer = ProbationBuffer(cfg.M)
    half = cfg.epochs // 2
    history = []
    best = (-1.0, None, 0)  # (val mrr, snapshot, epoch)
    stale = 0
    stopped = cfg.epochs
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_pairs))
            sums = {}
            n_batches = 0
            for batch in _batches(order, cfg.batch_size):
                pairs = [train_pairs[i] for i in batch]
                with Tape() as tape:
                    total, parts, _ = model.loss(pairs)
                value = total.item()
                parts = dict(parts, total=value)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}",
                                       state=_state_dump(epoch, parts, model))
                opt.step(tape.backward(total))
                for k, v in parts.items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            losses = {k: v / n_batches for k, v in sums.items()}

            if cfg.iterative and epoch > half and (epoch - half) % cfg.R == 0:
                e1, e2 = model.eval_embeddings()
                taken = train_pairs + val_pairs
                cands = mutual_nn_pairs(e1, e2, ([p[0] for p in taken], [p[1] for p in taken]))
                promoted = buffer.update(cands, epoch)
                train_pairs.extend(promoted)
                if promoted:
                    log.debug("epoch %d: promoted %d pairs", epoch, len(promoted))

            record = {"epoch": epoch, "losses": losses, "buffer": len(buffer),
                      "train_pairs": len(train_pairs)}
            last = epoch == cfg.epochs
            if epoch % cfg.eval_every == 0 or last:
                res = evaluate(model, test_pairs, cfg.bidirectional)
                if res is not None:
                    record.update(res.as_dict())
                if val_pairs:
                    val = evaluate(model, val_pairs).mrr
                    record["val_mrr"] = val
                    if val > best[0]:
                        snap = {k: t.data.copy() for k, t in model.state().items()}
                        best, stale = (val, snap, epoch), 0
                    else:
                        stale += 1
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
            if on_epoch:
                on_epoch(record)
            log.info("epoch %d loss %.4f %s", epoch, losses.get("total", float("nan")),
                     "" if "mrr" not in record else f"mrr {record['mrr']:.4f}")
            if cfg.patience and stale >= cfg.patience:
                stopped = epoch
                break
    finally:
        if sink:
            sink.close()
    if best[1] is not None:
        model.load_state(best[1])
    return TrainResult(model, history, train_pairs, buffer, stopped)
