"""Top-k retrieval engines over a long behavior sequence.

Sequences are ordered oldest to newest, so a larger position is more recent.
Every engine breaks ties toward the more recent position.  Scores follow a
"larger is better" contract; hamming scores are negated distances.

Batched helpers take left-aligned padded inputs with per-row ``lengths`` and
return ``(indices, counts)`` where unused slots hold -1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eta_ctr import _kernels
from eta_ctr.hashing import HashPlanes, fingerprint_batch
from eta_ctr.numeric import DTYPE, ShapeError

ENGINES = ("eta", "exact", "hard", "eta-frozen")


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalRequest:
    target_embedding: np.ndarray
    target_category: int
    sequence_embeddings: np.ndarray
    sequence_categories: np.ndarray
    k: int

    def __post_init__(self):
        t = np.asarray(self.target_embedding, dtype=DTYPE)
        s = np.asarray(self.sequence_embeddings, dtype=DTYPE)
        c = np.asarray(self.sequence_categories, dtype=np.int64)
        if self.k < 1:
            raise RetrievalError(f"k must be >= 1, got {self.k}")
        if s.ndim != 2 or s.shape[0] < 1:
            raise ShapeError(f"sequence embeddings must be a non-empty L x d matrix, got {s.shape}")
        if t.shape != (s.shape[1],):
            raise ShapeError(f"target of shape {t.shape} vs sequence width {s.shape[1]}")
        if c.shape != (s.shape[0],):
            raise ShapeError(f"{c.shape[0] if c.ndim else 0} categories for {s.shape[0]} items")
        object.__setattr__(self, "target_embedding", t)
        object.__setattr__(self, "sequence_embeddings", s)
        object.__setattr__(self, "sequence_categories", c)

    @property
    def length(self) -> int:
        return self.sequence_embeddings.shape[0]


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.indices)

    def as_set(self) -> set[int]:
        return set(int(i) for i in self.indices)


@dataclass(frozen=True)
class FingerprintStore:
    """Immutable snapshot of packed fingerprints, one row per key."""

    words: np.ndarray = field(repr=False)
    m: int

    def __post_init__(self):
        self.words.setflags(write=False)

    def __len__(self):
        return self.words.shape[0]

    def take(self, ids: np.ndarray) -> np.ndarray:
        return self.words[ids]


def freeze_fingerprints(E: np.ndarray, planes: HashPlanes) -> FingerprintStore:
    E = np.asarray(E, dtype=DTYPE)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ShapeError(f"cannot snapshot an empty or non-matrix input of shape {E.shape}")
    words = fingerprint_batch(E, planes).copy()
    return FingerprintStore(words=words, m=planes.m)


# ---------------------------------------------------------------- selection


def _lengths_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def select_by_score(scores: np.ndarray, k: int, valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-k of float scores: score descending, then position descending."""
    scores = np.asarray(scores, dtype=DTYPE)
    n_rows, n = scores.shape
    if valid is not None:
        scores = np.where(valid, scores, -np.inf)
    kk = min(k, n)
    out = np.full((n_rows, k), -1, dtype=np.int64)
    if kk == 0 or n_rows == 0:
        return out, np.zeros(n_rows, dtype=np.int64)
    if kk < n:
        part = np.argpartition(-scores, kk - 1, axis=1)[:, :kk]
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
        n_ge = (scores >= kth[:, None]).sum(axis=1)
        # boundary ties: the partition may have taken an older tied position
        for r in np.flatnonzero(n_ge > kk):
            row = scores[r]
            order = np.lexsort((-np.arange(n), -row))
            part[r] = order[:kk]
    else:
        part = np.broadcast_to(np.arange(n), (n_rows, n)).copy()
    vals = np.take_along_axis(scores, part, axis=1)
    order = np.lexsort((-part, -vals), axis=-1)
    part = np.take_along_axis(part, order, axis=1)
    vals = np.take_along_axis(vals, order, axis=1)
    part = np.where(np.isneginf(vals), -1, part)
    out[:, :kk] = part
    counts = (part >= 0).sum(axis=1)
    return out, counts


def select_hamming(target_words: np.ndarray, seq_words: np.ndarray, lengths: np.ndarray, k: int, m: int):
    """Per-row hamming top-k.  ``seq_words`` is (N, L, W); ``target_words`` is (N, W)."""
    idx, _, counts = _kernels.topk_rows(
        np.ascontiguousarray(target_words, dtype=np.uint64),
        np.ascontiguousarray(seq_words, dtype=np.uint64),
        np.ascontiguousarray(lengths, dtype=np.int64),
        int(k),
        int(m),
    )
    return idx, counts


def select_exact(targets: np.ndarray, seqs: np.ndarray, lengths: np.ndarray, k: int):
    scores = np.einsum("nld,nd->nl", seqs, targets)
    return select_by_score(scores, k, _lengths_mask(lengths, seqs.shape[1]))


def select_hard(target_cats: np.ndarray, seq_cats: np.ndarray, lengths: np.ndarray, k: int):
    """Most recent ``k`` positions whose category equals the target's."""
    n_rows, n = seq_cats.shape
    match = (seq_cats == np.asarray(target_cats)[:, None]) & _lengths_mask(lengths, n)
    out = np.full((n_rows, k), -1, dtype=np.int64)
    counts = np.zeros(n_rows, dtype=np.int64)
    rev = match[:, ::-1]
    rank = np.cumsum(rev, axis=1)
    take = rev & (rank <= k)
    rows, cols = np.nonzero(take)
    slots = rank[rows, cols] - 1
    out[rows, slots] = n - 1 - cols
    np.add.at(counts, rows, 1)
    return out, counts


def select_all(lengths: np.ndarray, n: int):
    lengths = np.asarray(lengths, dtype=np.int64)
    idx = np.broadcast_to(np.arange(n), (len(lengths), n)).copy()
    idx[~_lengths_mask(lengths, n)] = -1
    return idx, lengths.copy()


# --------------------------------------------------------- single requests


def _result(idx: np.ndarray, count: int, scores_full: np.ndarray) -> RetrievalResult:
    sel = idx[:count].astype(np.int64)
    return RetrievalResult(indices=sel, scores=scores_full[sel].astype(DTYPE))


def topk_hamming(
    req: RetrievalRequest, planes: HashPlanes, cache: FingerprintStore | None = None
) -> RetrievalResult:
    """Positions with the smallest hamming distance to the target fingerprint.

    Sequence fingerprints come from the current embeddings, or from ``cache``
    when a frozen snapshot is supplied.  The target is always hashed fresh.
    """
    if planes.d != req.sequence_embeddings.shape[1]:
        raise ShapeError(f"planes built for d={planes.d}, embeddings have d={req.sequence_embeddings.shape[1]}")
    if cache is not None:
        if len(cache) != req.length or cache.m != planes.m:
            raise ShapeError(f"store holds {len(cache)} x m={cache.m}, request needs {req.length} x m={planes.m}")
        seq_words = np.asarray(cache.words)
    else:
        seq_words = fingerprint_batch(req.sequence_embeddings, planes)
    target_words = fingerprint_batch(req.target_embedding[None, :], planes)
    idx, dist, counts = _kernels.topk_shared(target_words, np.ascontiguousarray(seq_words.T), req.k, planes.m)
    c = int(counts[0])
    return RetrievalResult(indices=idx[0, :c].copy(), scores=-dist[0, :c].astype(DTYPE))


def topk_exact(req: RetrievalRequest) -> RetrievalResult:
    scores = req.sequence_embeddings @ req.target_embedding
    idx, counts = select_by_score(scores[None, :], req.k)
    return _result(idx[0], int(counts[0]), scores)


def topk_hard(req: RetrievalRequest) -> RetrievalResult:
    idx, counts = select_hard(
        np.array([req.target_category]), req.sequence_categories[None, :], np.array([req.length]), req.k
    )
    match = (req.sequence_categories == req.target_category).astype(DTYPE)
    return _result(idx[0], int(counts[0]), match)


# ------------------------------------------------------ shared-key batches


def topk_hamming_shared(target_words: np.ndarray, seq_words_t: np.ndarray, k: int, m: int):
    """B targets against one sequence.  ``seq_words_t`` is the transposed (W, L) key block."""
    idx, _, _ = _kernels.topk_shared(target_words, seq_words_t, k, m)
    return idx


def topk_exact_shared(targets: np.ndarray, seq: np.ndarray, k: int):
    idx, _ = select_by_score(targets @ seq.T, k)
    return idx


def topk_hard_shared(target_cats: np.ndarray, seq_cats: np.ndarray, k: int):
    n = seq_cats.shape[0]
    b = target_cats.shape[0]
    idx, _ = select_hard(target_cats, np.broadcast_to(seq_cats, (b, n)), np.full(b, n), k)
    return idx
