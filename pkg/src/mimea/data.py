"""Multi-modal KG containers, file I/O, synthetic twin graphs and seed splits.

Directory layout (UTF-8, tab separated)::

    triples_1.tsv / triples_2.tsv            head  relation  tail
    attr_triples_1.tsv / attr_triples_2.tsv  entity  attribute  literal
    visual_1.f32le / visual_2.f32le          u32 n, u32 d_v, then n*d_v float32 (LE)
    links.tsv                                id_in_G  id_in_G'

An all-zero visual row marks an entity without an image.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

FILE_NAMES = (
    "triples_1.tsv", "triples_2.tsv",
    "attr_triples_1.tsv", "attr_triples_2.tsv",
    "visual_1.f32le", "visual_2.f32le",
    "links.tsv",
)


def build_bow(n, pairs, vocab_size):
    """Binary entity x type indicator from (entity, type) index pairs."""
    bow = np.zeros((n, max(vocab_size, 1)), dtype=bool)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        bow[pairs[:, 0], pairs[:, 1]] = True
    return bow


@dataclass
class MultiModalKG:
    n: int
    relational_triples: np.ndarray  # (k, 3) int64: head, relation, tail
    attribute_triples: np.ndarray  # (k, 2) int64: entity, attribute
    attribute_literals: list
    relation_vocab_size: int
    attribute_vocab_size: int
    relation_bow: np.ndarray  # (n, relation_vocab_size) bool
    attribute_bow: np.ndarray  # (n, attribute_vocab_size) bool
    visual_features: np.ndarray  # (n, d_v) float64, zero rows where has_image is False
    has_image: np.ndarray  # (n,) bool

    @classmethod
    def from_triples(cls, n, relational_triples, attribute_triples, visual_features,
                     relation_vocab_size=None, attribute_vocab_size=None, attribute_literals=None):
        rel = np.asarray(relational_triples, dtype=np.int64).reshape(-1, 3)
        att = np.asarray(attribute_triples, dtype=np.int64).reshape(-1, 2)
        if relation_vocab_size is None:
            relation_vocab_size = int(rel[:, 1].max()) + 1 if len(rel) else 1
        if attribute_vocab_size is None:
            attribute_vocab_size = int(att[:, 1].max()) + 1 if len(att) else 1
        visual = np.asarray(visual_features, dtype=np.float64)
        if visual.shape[0] != n:
            raise DataError(f"visual features have {visual.shape[0]} rows, expected {n}")
        incident = np.concatenate([rel[:, [0, 1]], rel[:, [2, 1]]]) if len(rel) else rel[:, :2]
        if attribute_literals is None:
            attribute_literals = [""] * len(att)
        return cls(
            n=n,
            relational_triples=rel,
            attribute_triples=att,
            attribute_literals=list(attribute_literals),
            relation_vocab_size=relation_vocab_size,
            attribute_vocab_size=attribute_vocab_size,
            relation_bow=build_bow(n, incident, relation_vocab_size),
            attribute_bow=build_bow(n, att, attribute_vocab_size),
            visual_features=visual,
            has_image=np.any(visual != 0, axis=1),
        )

    @property
    def visual_dim(self):
        return self.visual_features.shape[1]

    def stats(self):
        """Counts in the shape of the usual dataset statistics table."""
        return {
            "entities": self.n,
            "relations": int(np.unique(self.relational_triples[:, 1]).size),
            "attributes": int(np.unique(self.attribute_triples[:, 1]).size),
            "relational_triples": int(len(self.relational_triples)),
            "attribute_triples": int(len(self.attribute_triples)),
            "images": int(self.has_image.sum()),
        }

    def adjacency(self, attr_edges=False):
        """Dense symmetric boolean adjacency with self-loops.

        With ``attr_edges`` two entities sharing an attribute type are also
        linked.
        """
        adj = np.eye(self.n, dtype=bool)
        rel = self.relational_triples
        if len(rel):
            adj[rel[:, 0], rel[:, 2]] = True
            adj[rel[:, 2], rel[:, 0]] = True
        if attr_edges:
            bow = self.attribute_bow.astype(np.int64)
            adj |= (bow @ bow.T) > 0
        return adj


def union(kg1, kg2):
    """Disjoint union of two KGs; entities of ``kg2`` are offset by ``kg1.n``.

    Both graphs share the relation/attribute id space.
    """
    if kg1.visual_dim != kg2.visual_dim:
        raise DataError(f"visual dims differ: {kg1.visual_dim} vs {kg2.visual_dim}")
    off = kg1.n
    rel2 = kg2.relational_triples.copy()
    rel2[:, [0, 2]] += off
    att2 = kg2.attribute_triples.copy()
    att2[:, 0] += off
    return MultiModalKG.from_triples(
        kg1.n + kg2.n,
        np.concatenate([kg1.relational_triples, rel2]),
        np.concatenate([kg1.attribute_triples, att2]),
        np.concatenate([kg1.visual_features, kg2.visual_features]),
        relation_vocab_size=max(kg1.relation_vocab_size, kg2.relation_vocab_size),
        attribute_vocab_size=max(kg1.attribute_vocab_size, kg2.attribute_vocab_size),
        attribute_literals=kg1.attribute_literals + kg2.attribute_literals,
    )


@dataclass
class AlignmentSeedSet:
    train_pairs: list
    test_pairs: list
    seed_ratio: float
    probation_buffer: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_pairs = [tuple(map(int, p)) for p in self.train_pairs]
        self.test_pairs = [tuple(map(int, p)) for p in self.test_pairs]
        check_one_to_one(self.train_pairs + self.test_pairs)

    @property
    def all_pairs(self):
        return self.train_pairs + self.test_pairs


def check_one_to_one(pairs):
    left, right = set(), set()
    for a, b in pairs:
        if a in left or b in right:
            raise DataError(f"pair ({a}, {b}) violates the 1-to-1 constraint")
        left.add(a)
        right.add(b)


def split_seeds(pairs, ratio, seed):
    """Shuffle ``pairs`` and put round(ratio * len) of them in the train set.

    Rounding is half-up, so 0.5 of 11 pairs gives 6 train / 5 test.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"seed ratio must lie in (0, 1), got {ratio}")
    pairs = [tuple(map(int, p)) for p in pairs]
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(math.floor(ratio * len(pairs) + 0.5))
    shuffled = [pairs[i] for i in order]
    return AlignmentSeedSet(shuffled[:n_train], shuffled[n_train:], ratio)


# ---------------------------------------------------------------- file I/O

def _read_tsv(path, fields, int_fields):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != fields:
                raise DataError(f"{path}:{lineno}: expected {fields} tab-separated fields, got {len(parts)}")
            try:
                ints = [int(parts[i]) for i in range(int_fields)]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer id in {line!r}") from None
            rows.append((lineno, ints, parts[int_fields:]))
    return rows


def _check_range(path, lineno, value, limit, what):
    if not 0 <= value < limit:
        raise DataError(f"{path}:{lineno}: {what} {value} out of range [0, {limit})")


def read_visual(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    n, d_v = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * n * d_v
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for n={n}, d_v={d_v}, got {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, d_v).astype(np.float64)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite visual feature")
    return feats


def write_visual(path, features):
    features = np.asarray(features, dtype="<f4")
    n, d_v = features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", n, d_v))
        fh.write(features.tobytes())


def load_kg_pair(directory):
    """Read both graphs and the ground-truth links from ``directory``.

    Returns (kg1, kg2, seeds) where seeds holds every link as a test pair;
    call :func:`split_seeds` on ``seeds.test_pairs`` to get a train split.
    """
    directory = Path(directory)
    for name in FILE_NAMES:
        if not (directory / name).is_file():
            raise DataError(f"{directory}: missing required file {name}")

    visual = [read_visual(directory / f"visual_{k}.f32le") for k in (1, 2)]
    rel_rows = [_read_tsv(directory / f"triples_{k}.tsv", 3, 3) for k in (1, 2)]
    att_rows = [_read_tsv(directory / f"attr_triples_{k}.tsv", 3, 2) for k in (1, 2)]

    rel_vocab = 1 + max([r[1][1] for rows in rel_rows for r in rows], default=0)
    att_vocab = 1 + max([r[1][1] for rows in att_rows for r in rows], default=0)

    kgs = []
    for k in (0, 1):
        n = visual[k].shape[0]
        rel_path = directory / f"triples_{k + 1}.tsv"
        att_path = directory / f"attr_triples_{k + 1}.tsv"
        for lineno, (h, r, t), _ in rel_rows[k]:
            _check_range(rel_path, lineno, h, n, "head")
            _check_range(rel_path, lineno, t, n, "tail")
            if r < 0:
                raise DataError(f"{rel_path}:{lineno}: negative relation id {r}")
        for lineno, (e, a), _ in att_rows[k]:
            _check_range(att_path, lineno, e, n, "entity")
            if a < 0:
                raise DataError(f"{att_path}:{lineno}: negative attribute id {a}")
        kgs.append(MultiModalKG.from_triples(
            n,
            [r[1] for r in rel_rows[k]],
            [r[1] for r in att_rows[k]],
            visual[k],
            relation_vocab_size=rel_vocab,
            attribute_vocab_size=att_vocab,
            attribute_literals=[r[2][0] for r in att_rows[k]],
        ))

    links_path = directory / "links.tsv"
    links = []
    for lineno, (a, b), _ in _read_tsv(links_path, 2, 2):
        _check_range(links_path, lineno, a, kgs[0].n, "left id")
        _check_range(links_path, lineno, b, kgs[1].n, "right id")
        links.append((a, b))
    check_one_to_one(links)
    return kgs[0], kgs[1], AlignmentSeedSet([], links, 0.0)


def write_kg_pair(directory, kg1, kg2, links):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, kg in ((1, kg1), (2, kg2)):
        with open(directory / f"triples_{k}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in kg.relational_triples)
        with open(directory / f"attr_triples_{k}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{e}\t{a}\t{lit}\n"
                          for (e, a), lit in zip(kg.attribute_triples, kg.attribute_literals))
        write_visual(directory / f"visual_{k}.f32le", kg.visual_features)
    with open(directory / "links.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{a}\t{b}\n" for a, b in links)
    return directory


def fingerprint(directory):
    """sha256 per data file, for run manifests."""
    directory = Path(directory)
    return {name: hashlib.sha256((directory / name).read_bytes()).hexdigest()
            for name in FILE_NAMES if (directory / name).is_file()}


# ---------------------------------------------------------------- synthetic data

def gen_synthetic_pair(n, d_v=16, noise=0.0, seed=0, seed_ratio=0.2, image_rate=0.9,
                       visual_spread=0.5, relation_types=None, attribute_types=None,
                       visual_classes=None):
    """Generate a KG and a noisy, relabelled copy with known alignment.

    G' is G under a random entity permutation.  A ``noise`` fraction of G's
    relational triples get a random relation and tail, the same fraction of
    attribute triples get a random attribute type (which flips the derived
    bag-of-words bits), and visual features receive Gaussian noise with
    standard deviation ``noise`` times the feature scale.

    Visual features are class prototypes plus a smaller per-entity term, so
    the visual modality separates classes better than individual entities.
    """
    if n < 4:
        raise ConfigError(f"synthetic graphs need n >= 4, got {n}")
    if not 0 <= noise <= 1:
        raise ConfigError(f"noise must lie in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    n_rel = relation_types or max(2, n // 6)
    n_att = attribute_types or max(2, n // 8)
    n_cls = visual_classes or max(2, n // 8)

    # spanning tree keeps the graph connected, then extra random edges
    heads = [int(rng.integers(0, i)) for i in range(1, n)]
    tails = list(range(1, n))
    extra = n
    heads += rng.integers(0, n, size=extra).tolist()
    tails += rng.integers(0, n, size=extra).tolist()
    rels = rng.integers(0, n_rel, size=len(heads))
    rel_triples = np.array([(h, r, t) for h, r, t in zip(heads, rels, tails) if h != t], dtype=np.int64)

    att_counts = rng.integers(1, 4, size=n)
    att_ent = np.repeat(np.arange(n), att_counts)
    att_triples = np.stack([att_ent, rng.integers(0, n_att, size=att_ent.size)], axis=1)
    literals = [f"v{int(x)}" for x in rng.integers(0, 1000, size=len(att_triples))]

    classes = rng.integers(0, n_cls, size=n)
    protos = rng.normal(size=(n_cls, d_v))
    visual = protos[classes] + visual_spread * rng.normal(size=(n, d_v))
    has_image = rng.random(n) < image_rate
    visual[~has_image] = 0.0
    visual = visual.astype(np.float32).astype(np.float64)

    kg1 = MultiModalKG.from_triples(n, rel_triples, att_triples, visual, n_rel, n_att, literals)

    perm = rng.permutation(n)
    rel2 = rel_triples.copy()
    rel2[:, 0] = perm[rel2[:, 0]]
    rel2[:, 2] = perm[rel2[:, 2]]
    n_rewire = int(round(noise * len(rel2)))
    if n_rewire:
        pick = rng.choice(len(rel2), size=n_rewire, replace=False)
        new_tail = rng.integers(0, n, size=n_rewire)
        ok = new_tail != rel2[pick, 0]
        rel2[pick[ok], 1] = rng.integers(0, n_rel, size=int(ok.sum()))
        rel2[pick[ok], 2] = new_tail[ok]
    rel2 = rel2[rng.permutation(len(rel2))]

    att2 = att_triples.copy()
    att2[:, 0] = perm[att2[:, 0]]
    n_flip = int(round(noise * len(att2)))
    if n_flip:
        pick = rng.choice(len(att2), size=n_flip, replace=False)
        att2[pick, 1] = rng.integers(0, n_att, size=n_flip)
    att_order = rng.permutation(len(att2))
    att2 = att2[att_order]
    literals2 = [literals[i] for i in att_order]

    visual2 = np.zeros_like(visual)
    jitter = noise * visual[has_image].std() * rng.normal(size=(n, d_v)) if has_image.any() else 0.0
    visual2[perm] = np.where(has_image[:, None], visual + jitter, 0.0)
    visual2 = visual2.astype(np.float32).astype(np.float64)

    kg2 = MultiModalKG.from_triples(n, rel2, att2, visual2, n_rel, n_att, literals2)
    links = [(i, int(perm[i])) for i in range(n)]
    seeds = split_seeds(links, seed_ratio, seed)
    return kg1, kg2, seeds
