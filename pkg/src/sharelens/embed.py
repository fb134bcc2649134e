"""Review-text embeddings and latent-space isolation instruments.

Entity vectors are learned with the distributed bag-of-words form of
Paragraph Vector: each (document, word) pair is a positive example for the
logistic score ``sigmoid(v_doc . u_word)`` and ``negative`` words drawn from
the unigram distribution raised to 3/4 serve as negatives.

Isolation of an alternative is the mean (and population standard deviation)
of its angular distance to the other alternatives in the same market and
period.
"""

from __future__ import annotations

import bisect
import json
import logging
import re
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import pandas as pd

from .errors import ConfigError, DomainError, EmbeddingError

logger = logging.getLogger(__name__)

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than two characters."""
    return [t for t in _SPLIT.split(text.lower()) if len(t) >= 2]


# -- angular distance -----------------------------------------------------------


def angular_distance(u, v) -> float:
    """``arccos(cos(u, v)) / pi``, a metric on directions with range [0, 1].

    Evaluated as ``2 atan2(|a - b|, |a + b|) / pi`` on the unit vectors
    ``a, b``, which stays accurate for nearly parallel directions where
    ``arccos`` of a rounded cosine loses about half the digits.
    """
    u, v = np.asarray(u, float), np.asarray(v, float)
    if u.shape != v.shape:
        raise DomainError(f"vectors have different shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("angular distance is undefined for a zero vector")
    a, b = u / nu, v / nv
    return float(2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b)) / np.pi)


def pairwise_angular(M):
    """Matrix of angular distances between the rows of ``M``."""
    M = np.asarray(M, float)
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0):
        raise DomainError("angular distance is undefined for a zero vector")
    U = M / norms[:, None]
    diff = np.linalg.norm(U[:, None, :] - U[None, :, :], axis=2)
    summ = np.linalg.norm(U[:, None, :] + U[None, :, :], axis=2)
    out = 2.0 * np.arctan2(diff, summ) / np.pi
    np.fill_diagonal(out, 0.0)
    return out


# -- model ------------------------------------------------------------------------


@dataclass
class EmbeddingConfig:
    dim: int = 32
    word_dim: int | None = None
    negative: int = 5
    epochs: int = 100
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    seed: int = 0
    word_layer: str = "trainable"
    doc_unit: str = "per_alt_period"
    schedule: str = "chronological"
    min_count: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.word_dim is None:
            self.word_dim = self.dim
        if self.dim < 2:
            raise ConfigError("embedding dimension must be at least 2")
        if self.word_dim != self.dim:
            raise ConfigError("word and entity dimensions must match for dot-product scoring")
        if self.negative < 1 or self.epochs < 1:
            raise ConfigError("need at least one negative sample and one epoch")
        if self.word_layer not in ("trainable", "frozen"):
            raise ConfigError(f"unknown word_layer {self.word_layer!r}")
        if self.doc_unit not in ("per_alt_period", "per_review"):
            raise ConfigError(f"unknown doc_unit {self.doc_unit!r}")
        if self.schedule not in ("chronological", "joint"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.workers != 1:
            logger.warning("training runs single-threaded; workers=%d ignored", self.workers)


@dataclass
class EmbeddingModel:
    entity_matrix: np.ndarray
    word_matrix: np.ndarray
    vocab: dict
    keys: list
    trained: np.ndarray
    config: EmbeddingConfig
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        index: dict = {}
        for row, key in enumerate(self.keys):
            index.setdefault((key[0], key[1]), []).append(row)
        self._index = index
        by_alt: dict = {}
        for (alt, period), rows in index.items():
            if self.trained[rows].any():
                by_alt.setdefault(alt, []).append(period)
        self._periods = {a: sorted(p) for a, p in by_alt.items()}

    def entity(self, alt, period):
        """Unit-mean entity vector of (alt, period), or None when untrained."""
        rows = [r for r in self._index.get((alt, period), []) if self.trained[r]]
        if not rows:
            return None
        V = self.entity_matrix[rows]
        V = V / np.linalg.norm(V, axis=1, keepdims=True)
        return V.mean(axis=0)

    def latest(self, alt, period):
        """Most recent trained vector of ``alt`` dated at or before ``period``."""
        periods = self._periods.get(alt, [])
        i = bisect.bisect_right(periods, period)
        if i == 0:
            return None, None
        p = periods[i - 1]
        return self.entity(alt, p), p

    def save(self, path):
        header = {
            "J_docs": int(self.entity_matrix.shape[0]), "V": int(self.word_matrix.shape[0]),
            "q": int(self.entity_matrix.shape[1]), "q_w": int(self.word_matrix.shape[1]),
            "config": asdict(self.config),
            "keys": [[_plain(k) for k in key] for key in self.keys],
            "vocab": sorted(self.vocab, key=self.vocab.get),
            "trained": [bool(t) for t in self.trained],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.entity_matrix, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.word_matrix, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            J, V, q, qw = header["J_docs"], header["V"], header["q"], header["q_w"]
            D = np.frombuffer(fh.read(J * q * 8), dtype="<f8").reshape(J, q).copy()
            W = np.frombuffer(fh.read(V * qw * 8), dtype="<f8").reshape(V, qw).copy()
        return cls(D, W, {w: i for i, w in enumerate(header["vocab"])}, [tuple(k) for k in header["keys"]],
                   np.array(header["trained"], bool), EmbeddingConfig(**header["config"]))


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def load_word_vectors(path) -> dict:
    """Read ``token v1 ... vq`` lines; a leading ``count dim`` header line is skipped."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            if n == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            vectors[parts[0]] = np.array(parts[1:], float)
    dims = {v.shape[0] for v in vectors.values()}
    if len(dims) > 1:
        raise EmbeddingError(f"word vectors have inconsistent dimensions {sorted(dims)}")
    return vectors


def build_documents(reviews: dict, unit="per_alt_period") -> dict:
    """Corpus keyed by (alt, period) or, per review, by (alt, period, index)."""
    docs = {}
    for (alt, period), texts in reviews.items():
        texts = [texts] if isinstance(texts, str) else list(texts)
        if unit == "per_alt_period":
            docs[(alt, period)] = " ".join(texts)
        elif unit == "per_review":
            for i, text in enumerate(texts):
                docs[(alt, period, i)] = text
        else:
            raise ConfigError(f"unknown doc_unit {unit!r}")
    return docs


# -- training ----------------------------------------------------------------------


@numba.njit(cache=True)
def _sgd_epoch(D, W, docs, words, negs, lr_start, lr_end, update_words):
    n = docs.shape[0]
    k = negs.shape[1]
    q = D.shape[1]
    grad = np.empty(q)
    for i in range(n):
        lr = lr_start + (lr_end - lr_start) * i / n
        d = docs[i]
        for c in range(q):
            grad[c] = 0.0
        for s in range(k + 1):
            if s == 0:
                w = words[i]
                label = 1.0
            else:
                w = negs[i, s - 1]
                if w == words[i]:
                    continue
                label = 0.0
            f = 0.0
            for c in range(q):
                f += D[d, c] * W[w, c]
            if f > 30.0:
                sig = 1.0
            elif f < -30.0:
                sig = 0.0
            else:
                sig = 1.0 / (1.0 + np.exp(-f))
            g = (label - sig) * lr
            for c in range(q):
                grad[c] += g * W[w, c]
            if update_words:
                for c in range(q):
                    W[w, c] += g * D[d, c]
        for c in range(q):
            D[d, c] += grad[c]


def train_embeddings(docs: dict, config: EmbeddingConfig | None = None, pretrained: dict | None = None) -> EmbeddingModel:
    """Learn one entity vector per document.

    ``docs`` maps keys whose first two fields are (alt, period) to text.
    Under the ``chronological`` schedule documents are visited period by
    period: vocabulary, negative-sampling counts and the word layer at period
    ``t`` depend only on documents dated at or before ``t``, so editing later
    documents never moves earlier entity vectors.  ``joint`` trains on the
    whole corpus at once.  Results are deterministic for a fixed seed.
    """
    config = config or EmbeddingConfig()
    if not pretrained and config.word_layer == "frozen":
        raise EmbeddingError("frozen word layer needs pre-trained vectors")
    if pretrained:
        dim = next(iter(pretrained.values())).shape[0]
        if dim != config.dim:
            raise ConfigError(f"pre-trained vectors have dimension {dim}, config expects {config.dim}")

    keys = sorted(docs, key=lambda k: (k[1], str(k[0]), tuple(k[2:])))
    tokens = [tokenize(docs[k] or "") for k in keys]
    if sum(1 for t in tokens if t) < 2:
        raise EmbeddingError("need at least two non-empty documents")

    periods = [k[1] for k in keys]
    if config.schedule == "joint":
        blocks = [np.arange(len(keys))]
    else:
        blocks = [np.array([i for i, p in enumerate(periods) if p == t]) for t in sorted(set(periods))]

    q = config.dim
    vocab: dict = {}
    counts: list = []
    pending: dict = {}
    D = np.zeros((len(keys), q))
    W = np.zeros((0, q))
    ids: list = [np.zeros(0, np.int64)] * len(keys)
    update_words = config.word_layer == "trainable"
    lr0, lr1 = config.learning_rate, config.min_learning_rate

    for block in blocks:
        # vocabulary and sampling counts grow only from documents seen so far
        new_rows = []
        for word, c in _count_all([tokens[i] for i in block]).items():
            if word in vocab:
                counts[vocab[word]] += c
                continue
            pending[word] = pending.get(word, 0) + c
            if pending[word] >= config.min_count:
                vocab[word] = len(vocab)
                counts.append(pending.pop(word))
                new_rows.append(pretrained[word] if pretrained and word in pretrained else np.zeros(q))
        if new_rows:
            W = np.vstack([W, np.array(new_rows, float)])
        for i in block:
            ids[i] = np.array([vocab[w] for w in tokens[i] if w in vocab], np.int64)

        period_key = periods[block[0]] if config.schedule == "chronological" else 0
        rng = np.random.default_rng([config.seed, _seed_part(period_key)])
        D[block] = (rng.random((len(block), q)) - 0.5) / q
        doc_idx = np.concatenate([np.full(ids[i].size, i, np.int64) for i in block])
        word_idx = np.concatenate([ids[i] for i in block])
        if word_idx.size == 0:
            continue
        prob = np.asarray(counts, float) ** 0.75
        cdf = np.cumsum(prob / prob.sum())
        cdf[-1] = 1.0
        for e in range(config.epochs):
            perm = rng.permutation(word_idx.size)
            negs = np.searchsorted(cdf, rng.random((word_idx.size, config.negative)), side="right").astype(np.int64)
            start = lr0 - (lr0 - lr1) * e / config.epochs
            end = lr0 - (lr0 - lr1) * (e + 1) / config.epochs
            _sgd_epoch(D, W, doc_idx[perm], word_idx[perm], negs, start, end, update_words)

    trained = np.array([i.size > 0 for i in ids])
    if not trained.all():
        logger.info("%d documents have no in-vocabulary words and stay untrained", int((~trained).sum()))
    return EmbeddingModel(D, W, vocab, [tuple(k) for k in keys], trained, config)


def _count_all(token_lists):
    out: dict = {}
    for toks in token_lists:
        for t in toks:
            out[t] = out.get(t, 0) + 1
    return out


def _seed_part(period):
    if isinstance(period, (int, np.integer)):
        return int(period) & 0xFFFFFFFF
    return int.from_bytes(str(period).encode()[:8].ljust(8, b"\0"), "little")


# -- instruments ---------------------------------------------------------------------


@dataclass
class InstrumentSet:
    """Per-observation excluded instruments keyed by (market, alt, period).

    ``reasons`` maps a masked key to why isolation is missing and
    ``sources`` records which document period fed each alternative's vector
    when the same-period document was unavailable.
    """

    data: pd.DataFrame
    reasons: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=lambda: {"isol_std": "population standard deviation (divide by n)"})

    @property
    def columns(self):
        return [c for c in self.data.columns if c not in ("market", "alt", "period")]

    def missing(self, column):
        return self.data[column].isna().to_numpy()

    def add(self, columns: dict):
        """Attach columns already aligned with this set's rows."""
        data = self.data.copy()
        for name, values in columns.items():
            data[name] = np.asarray(values, float)
        return InstrumentSet(data, dict(self.reasons), dict(self.sources), dict(self.metadata))

    def to_csv(self, path):
        self.data.to_csv(path, index=False, float_format="%.17g")


def isolation_instruments(model: EmbeddingModel, panel, scope="market", prefix="iv_isol") -> InstrumentSet:
    """Mean and population standard deviation of angular distance to rivals.

    Rivals are the other alternatives present in the same market and period
    (same nest too under ``scope="category"``).  Each alternative uses its
    latest trained vector dated at or before the period.  Cells with fewer
    than two eligible alternatives are masked.
    """
    if scope not in ("market", "category"):
        raise ConfigError(f"unknown isolation scope {scope!r}")
    d = panel.data
    mean = np.full(len(d), np.nan)
    std = np.full(len(d), np.nan)
    reasons, sources = {}, {}
    by = ["market", "period"] + (["nest"] if scope == "category" else [])
    for _, idx in d.groupby(by, sort=True).indices.items():
        rows = d.iloc[idx]
        vecs, ok = [], []
        for pos, (alt, period) in enumerate(zip(rows["alt"], rows["period"])):
            v, src = model.latest(alt, period)
            key = (rows["market"].iloc[pos], alt, period)
            if v is None or not np.linalg.norm(v) > 0:
                reasons[key] = "no trained document dated at or before the period"
                continue
            if src != period:
                sources[key] = src
            vecs.append(v)
            ok.append(idx[pos])
        if len(ok) < 2:
            for i in ok:
                reasons[(d["market"].iat[i], d["alt"].iat[i], d["period"].iat[i])] = "fewer than two eligible alternatives"
            continue
        dist = pairwise_angular(np.array(vecs))
        n = len(ok)
        others = dist[~np.eye(n, dtype=bool)].reshape(n, n - 1)
        mean[ok] = others.mean(axis=1)
        std[ok] = others.std(axis=1)
    out = d[["market", "alt", "period"]].copy()
    out[f"{prefix}_mean"] = mean
    out[f"{prefix}_std"] = std
    return InstrumentSet(out.reset_index(drop=True), reasons, sources)
