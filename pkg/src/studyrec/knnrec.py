"""Item-based KNN over sparse count features of the preceding ``h`` interactions.

Every training position with at least one predecessor becomes a stored vector
(counts of tokens among its previous ``h`` interactions) labelled with the
token at that position. At query time only stored vectors sharing a nonzero
token with the query are scored, via an inverted index. Each candidate item
gets the best cosine among stored vectors targeting it; the full ranking
orders items by that score, then by training popularity, then by token id.
"""

from __future__ import annotations

import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import rankable_tokens

INDEX_MAGIC = b"SRKN"
INDEX_VERSION = 1


class KnnError(Exception):
    pass


@dataclass(frozen=True)
class KnnConfig:
    history: int = 65
    neighbors: int = 2

    def __post_init__(self):
        if self.history < 1 or self.neighbors < 1:
            raise KnnError("history and neighbors must be >= 1")


SparseCounts = dict  # token -> positive count


def featurize(history: Sequence[int], h: int) -> SparseCounts:
    """Counts of each token among the last ``h`` entries of ``history``."""
    if h < 1:
        raise KnnError("h must be >= 1")
    if not history:
        return {}
    return dict(Counter(history[-h:]))


@dataclass
class InvertedIndex:
    vocab_size: int
    history: int
    indptr: np.ndarray  # CSR over stored vectors
    tokens: np.ndarray
    counts: np.ndarray
    targets: np.ndarray
    norms_sq: np.ndarray  # integer squared norms
    popularity: np.ndarray  # per token id
    postings: dict[int, tuple[np.ndarray, np.ndarray]]  # token -> (vector ids, counts)

    def __len__(self) -> int:
        return len(self.targets)

    def vector(self, i: int) -> SparseCounts:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return {int(t): int(c) for t, c in zip(self.tokens[lo:hi], self.counts[lo:hi])}

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(self.norms_sq.astype(np.float64))


def _from_vectors(
    vectors: Sequence[SparseCounts], targets: Sequence[int], popularity: np.ndarray, vocab_size: int, h: int
) -> InvertedIndex:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    toks: list[int] = []
    cnts: list[int] = []
    for i, vec in enumerate(vectors):
        if not vec:
            raise KnnError("stored vectors must be non-empty")
        items = sorted(vec.items())
        toks.extend(t for t, _ in items)
        cnts.extend(c for _, c in items)
        indptr[i + 1] = len(toks)
    tokens = np.asarray(toks, dtype=np.int64)
    counts = np.asarray(cnts, dtype=np.int64)
    rows = np.repeat(np.arange(len(vectors)), np.diff(indptr))
    norms_sq = np.bincount(rows, weights=counts * counts, minlength=len(vectors)).astype(np.int64)
    postings = {}
    if len(tokens):
        order = np.argsort(tokens, kind="stable")
        st, sr, sc = tokens[order], rows[order], counts[order]
        bounds = np.flatnonzero(np.diff(st)) + 1
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(st)]):
            postings[int(st[lo])] = (sr[lo:hi], sc[lo:hi])
    return InvertedIndex(
        vocab_size=vocab_size,
        history=h,
        indptr=indptr,
        tokens=tokens,
        counts=counts,
        targets=np.asarray(targets, dtype=np.int64),
        norms_sq=norms_sq,
        popularity=np.asarray(popularity, dtype=np.int64),
        postings=postings,
    )


def build_index(sequences: Iterable[Sequence[int]], cfg: KnnConfig, vocab_size: int) -> InvertedIndex:
    """Index every position that has at least one preceding interaction."""
    vectors, targets = [], []
    popularity = np.zeros(vocab_size, dtype=np.int64)
    for seq in sequences:
        seq = list(seq)
        for tok in seq:
            popularity[tok] += 1
        for k in range(1, len(seq)):
            vectors.append(featurize(seq[:k], cfg.history))
            targets.append(seq[k])
    return _from_vectors(vectors, targets, popularity, vocab_size, cfg.history)


def index_from_vectors(
    vectors: Sequence[SparseCounts], targets: Sequence[int], vocab_size: int, popularity=None, h: int = 65
) -> InvertedIndex:
    if popularity is None:
        popularity = np.zeros(vocab_size, dtype=np.int64)
    return _from_vectors(vectors, targets, popularity, vocab_size, h)


def item_scores(index: InvertedIndex, query: SparseCounts) -> np.ndarray:
    """Best cosine per token id (0 where no stored vector overlaps the query)."""
    scores = np.zeros(index.vocab_size, dtype=np.float64)
    hits = [(index.postings[t], c) for t, c in query.items() if t in index.postings]
    if not hits:
        return scores
    ids = np.concatenate([p[0] for p, _ in hits])
    vals = np.concatenate([p[1] * c for p, c in hits])
    cand, inv = np.unique(ids, return_inverse=True)
    dots = np.bincount(inv, weights=vals)
    qn = float(np.sqrt(sum(c * c for c in query.values())))
    cos = dots / (qn * np.sqrt(index.norms_sq[cand].astype(np.float64)))
    np.maximum.at(scores, index.targets[cand], cos)
    return scores


def _order(scores: np.ndarray, popularity: np.ndarray) -> np.ndarray:
    cand = rankable_tokens(len(scores))
    return cand[np.lexsort((cand, -popularity[cand], -scores[cand]))]


def score(index: InvertedIndex, query: SparseCounts) -> list[int]:
    """Full ranking of rankable tokens for ``query``; empty queries rank by popularity."""
    return _order(item_scores(index, query), index.popularity).tolist()


def rank_of(index: InvertedIndex, query: SparseCounts, target: int) -> int:
    s = item_scores(index, query)
    cand = rankable_tokens(len(s))
    pop = index.popularity
    ahead = (s[cand] > s[target]) | (
        (s[cand] == s[target]) & ((pop[cand] > pop[target]) | ((pop[cand] == pop[target]) & (cand < target)))
    )
    return int(ahead.sum()) + 1


def brute_force_ranking(index: InvertedIndex, query: SparseCounts) -> list[int]:
    """Dense all-pairs cosine ranking; the oracle for :func:`score`."""
    dense = np.zeros((len(index), index.vocab_size), dtype=np.float64)
    rows = np.repeat(np.arange(len(index)), np.diff(index.indptr))
    dense[rows, index.tokens] = index.counts
    q = np.zeros(index.vocab_size, dtype=np.float64)
    for t, c in query.items():
        q[t] = c
    scores = np.zeros(index.vocab_size, dtype=np.float64)
    if q.any():
        dots = dense @ q
        qn = float(np.sqrt(sum(c * c for c in query.values())))
        for i in np.flatnonzero(dots):
            cos = dots[i] / (qn * np.sqrt(float(index.norms_sq[i])))
            t = index.targets[i]
            scores[t] = max(scores[t], cos)
    return _order(scores, index.popularity).tolist()


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_index(path: str | os.PathLike, index: InvertedIndex) -> None:
    head = INDEX_MAGIC + struct.pack("<IIIQQ", INDEX_VERSION, index.vocab_size, index.history, len(index), len(index.tokens))
    body = b"".join(
        np.ascontiguousarray(a, dtype="<i8").tobytes()
        for a in (index.indptr, index.tokens, index.counts, index.targets, index.popularity)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(head + body)
    os.replace(tmp, path)


def load_index(path: str | os.PathLike) -> InvertedIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise KnnError(f"{path}: not a KNN index file")
    version, vocab, h, nvec, nnz = struct.unpack_from("<IIIQQ", raw, 4)
    if version != INDEX_VERSION:
        raise KnnError(f"{path}: unsupported index version {version}")
    pos = 4 + struct.calcsize("<IIIQQ")
    arrays = []
    for count in (nvec + 1, nnz, nnz, nvec, vocab):
        arrays.append(np.frombuffer(raw, "<i8", count, pos).astype(np.int64))
        pos += 8 * count
    indptr, tokens, counts, targets, popularity = arrays
    vectors = [
        {int(t): int(c) for t, c in zip(tokens[indptr[i] : indptr[i + 1]], counts[indptr[i] : indptr[i + 1]])}
        for i in range(nvec)
    ]
    return _from_vectors(vectors, targets, popularity, vocab, h)
