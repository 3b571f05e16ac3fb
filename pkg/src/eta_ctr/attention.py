"""Multi-head target attention and the long-term interest unit built on it.

The batched functions take a query per row ``q`` (N, d), keys/values
``X`` (N, n, d) and a boolean ``mask`` (N, n).  Rows whose mask is empty
produce a zero vector here; callers substitute a learned fallback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eta_ctr import retrieval
from eta_ctr.hashing import HashPlanes, fingerprint_batch
from eta_ctr.numeric import DTYPE, ShapeError, masked_softmax, softmax_backward

ATTENTION_KEYS = ("W_Q", "W_K", "W_V", "W_O")


class EmptySequenceError(ValueError):
    pass


@dataclass
class AttentionParams:
    W_Q: np.ndarray  # (h, d, d_k)
    W_K: np.ndarray  # (h, d, d_k)
    W_V: np.ndarray  # (h, d, d_v)
    W_O: np.ndarray  # (h * d_v, d)

    def __post_init__(self):
        h, d, dk = self.W_Q.shape
        if self.W_K.shape != (h, d, dk):
            raise ShapeError(f"W_K {self.W_K.shape} inconsistent with W_Q {self.W_Q.shape}")
        if self.W_V.shape[:2] != (h, d):
            raise ShapeError(f"W_V {self.W_V.shape} inconsistent with W_Q {self.W_Q.shape}")
        if self.W_O.shape != (h * self.W_V.shape[2], d):
            raise ShapeError(f"W_O {self.W_O.shape} must be ({h * self.W_V.shape[2]}, {d})")

    @property
    def heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[2]

    @property
    def d_v(self) -> int:
        return self.W_V.shape[2]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in ATTENTION_KEYS}

    @classmethod
    def from_dict(cls, params: dict[str, np.ndarray], prefix: str = "") -> AttentionParams:
        return cls(**{key: params[prefix + key] for key in ATTENTION_KEYS})


def init_attention(rng: np.random.Generator, d: int, heads: int = 2, d_k: int | None = None, d_v: int | None = None):
    d_k = d_k or max(1, d // heads)
    d_v = d_v or max(1, d // heads)
    s = 1.0 / np.sqrt(d)
    return AttentionParams(
        W_Q=rng.normal(0.0, s, (heads, d, d_k)),
        W_K=rng.normal(0.0, s, (heads, d, d_k)),
        W_V=rng.normal(0.0, s, (heads, d, d_v)),
        W_O=rng.normal(0.0, 1.0 / np.sqrt(heads * d_v), (heads * d_v, d)),
    )


def _project(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    # (..., d) x (h, d, e) -> (..., h, e)
    h, d, e = W.shape
    flat = X.reshape(-1, d) @ W.transpose(1, 0, 2).reshape(d, h * e)
    return flat.reshape(X.shape[:-1] + (h, e))


def _unproject(dY: np.ndarray, W: np.ndarray) -> np.ndarray:
    # adjoint of _project w.r.t. X
    h, d, e = W.shape
    flat = dY.reshape(-1, h * e) @ W.transpose(1, 0, 2).reshape(d, h * e).T
    return flat.reshape(dY.shape[:-2] + (d,))


def _weight_grad(X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    h, e = dY.shape[-2:]
    d = X.shape[-1]
    g = X.reshape(-1, d).T @ dY.reshape(-1, h * e)
    return g.reshape(d, h, e).transpose(1, 0, 2)


def attention_forward(q: np.ndarray, X: np.ndarray, mask: np.ndarray, p: AttentionParams):
    """Returns ``(out (N, d), cache)``; ``cache`` feeds :func:`attention_backward`."""
    if q.ndim != 2 or X.ndim != 3 or q.shape[1] != p.d or X.shape[2] != p.d or X.shape[0] != q.shape[0]:
        raise ShapeError(f"query {q.shape} / keys {X.shape} do not fit d={p.d}")
    scale = 1.0 / np.sqrt(p.d_k)
    Q = _project(q, p.W_Q)  # (N, h, dk)
    K = _project(X, p.W_K)  # (N, n, h, dk)
    V = _project(X, p.W_V)  # (N, n, h, dv)
    logits = np.einsum("nhk,nlhk->nhl", Q, K) * scale
    A = masked_softmax(logits, mask[:, None, :])
    heads = np.einsum("nhl,nlhv->nhv", A, V)
    concat = heads.reshape(q.shape[0], -1)
    out = concat @ p.W_O
    cache = (q, X, Q, K, V, A, concat, scale, p)
    return out, cache


def attention_backward(cache, dout: np.ndarray):
    """Returns ``(dq, dX, grads)`` with ``grads`` keyed like :data:`ATTENTION_KEYS`."""
    q, X, Q, K, V, A, concat, scale, p = cache
    dW_O = concat.T @ dout
    dheads = (dout @ p.W_O.T).reshape(q.shape[0], p.heads, p.d_v)
    dA = np.einsum("nhv,nlhv->nhl", dheads, V)
    dV = np.einsum("nhl,nhv->nlhv", A, dheads)
    dlogits = softmax_backward(A, dA) * scale
    dQ = np.einsum("nhl,nlhk->nhk", dlogits, K)
    dK = np.einsum("nhl,nhk->nlhk", dlogits, Q)
    dq = _unproject(dQ, p.W_Q)
    dX = _unproject(dK, p.W_K) + _unproject(dV, p.W_V)
    grads = {
        "W_Q": _weight_grad(q, dQ),
        "W_K": _weight_grad(X, dK),
        "W_V": _weight_grad(X, dV),
        "W_O": dW_O,
    }
    return dq, dX, grads


def attention_weights(q: np.ndarray, X: np.ndarray, mask: np.ndarray, p: AttentionParams) -> np.ndarray:
    _, cache = attention_forward(q, X, mask, p)
    return cache[5]


def target_attention(E_t: np.ndarray, E_s: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Attend from one target row ``E_t`` (1, d) over ``E_s`` (n, d); returns a length-d vector."""
    E_t = np.atleast_2d(np.asarray(E_t, dtype=DTYPE))
    E_s = np.asarray(E_s, dtype=DTYPE)
    if E_s.ndim != 2 or E_s.shape[0] == 0:
        raise EmptySequenceError(f"target attention needs at least one key row, got shape {E_s.shape}")
    if E_t.shape != (1, params.d) or E_s.shape[1] != params.d:
        raise ShapeError(f"E_t {E_t.shape} / E_s {E_s.shape} do not fit d={params.d}")
    out, _ = attention_forward(E_t, E_s[None], np.ones((1, E_s.shape[0]), bool), params)
    return out[0]


# -------------------------------------------------------------------- LTI


@dataclass(frozen=True)
class Engine:
    """A retrieval engine bound to whatever state it needs.

    ``name`` is one of ``"eta"``, ``"eta-frozen"``, ``"exact"``, ``"hard"``
    or ``"full"`` (every position).  Hamming engines need ``planes``; the
    frozen one also needs ``store`` holding one fingerprint per sequence
    position (or per vocabulary id when used by the model).
    """

    name: str
    planes: HashPlanes | None = None
    store: retrieval.FingerprintStore | None = None

    def __post_init__(self):
        if self.name not in retrieval.ENGINES + ("full",):
            raise retrieval.RetrievalError(f"unknown engine {self.name!r}")
        if self.name in ("eta", "eta-frozen") and self.planes is None:
            raise retrieval.RetrievalError(f"engine {self.name!r} needs hash planes")
        if self.name == "eta-frozen" and self.store is None:
            raise retrieval.RetrievalError("engine 'eta-frozen' needs a frozen fingerprint store")

    def select(
        self,
        targets: np.ndarray,
        seqs: np.ndarray,
        lengths: np.ndarray,
        k: int,
        target_cats: np.ndarray | None = None,
        seq_cats: np.ndarray | None = None,
        target_ids: np.ndarray | None = None,
        seq_ids: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched selection; returns ``(indices (N, k), counts (N,))`` in rank order."""
        n_rows, n, d = seqs.shape
        if self.name == "full":
            return retrieval.select_all(lengths, n)
        if self.name == "exact":
            return retrieval.select_exact(targets, seqs, lengths, k)
        if self.name == "hard":
            return retrieval.select_hard(target_cats, seq_cats, lengths, k)
        if self.name == "eta":
            words = fingerprint_batch(seqs.reshape(-1, d), self.planes).reshape(n_rows, n, -1)
            t_words = fingerprint_batch(targets, self.planes)
        else:
            # vocabulary-keyed store when ids are given, otherwise positional
            if seq_ids is None:
                seq_ids = np.broadcast_to(np.arange(n), (n_rows, n))
            words = self.store.take(seq_ids)
            t_words = self.store.take(target_ids) if target_ids is not None else fingerprint_batch(targets, self.planes)
        return retrieval.select_hamming(t_words, words, lengths, k, self.planes.m)


def positional_selection(idx: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Re-order selected indices by sequence position; returns ``(gather_idx, mask)``."""
    mask = np.arange(idx.shape[1])[None, :] < counts[:, None]
    keyed = np.where(mask, idx, np.iinfo(np.int64).max)
    ordered = np.sort(keyed, axis=1)
    return np.where(mask, ordered, 0), mask


def lti_forward(
    targets: np.ndarray,
    seqs: np.ndarray,
    lengths: np.ndarray,
    k: int,
    engine: Engine,
    params: AttentionParams,
    no_context: np.ndarray,
    **select_kw,
):
    """Batched LTI.  Returns ``(out (N, d), cache)``."""
    idx, counts = engine.select(targets, seqs, lengths, k, **select_kw)
    gather, mask = positional_selection(idx, counts)
    X = np.take_along_axis(seqs, gather[:, :, None], axis=1)
    X = np.where(mask[:, :, None], X, 0.0)
    out, att_cache = attention_forward(targets, X, mask, params)
    empty = counts == 0
    out = np.where(empty[:, None], no_context[None, :], out)
    return out, (att_cache, gather, mask, empty, seqs.shape)


def lti_backward(cache, dout: np.ndarray):
    """Returns ``(dtargets, dseqs, grads, dno_context)``; non-selected rows of ``dseqs`` are exactly zero."""
    att_cache, gather, mask, empty, seq_shape = cache
    d_no_context = dout[empty].sum(axis=0)
    dout = np.where(empty[:, None], 0.0, dout)
    dq, dX, grads = attention_backward(att_cache, dout)
    dX = np.where(mask[:, :, None], dX, 0.0)
    dseqs = np.zeros(seq_shape, dtype=DTYPE)
    rows = np.repeat(np.arange(seq_shape[0]), gather.shape[1])
    np.add.at(dseqs, (rows[mask.ravel()], gather.ravel()[mask.ravel()]), dX.reshape(-1, seq_shape[2])[mask.ravel()])
    return dq, dseqs, grads, d_no_context


def lti(
    E_t: np.ndarray,
    E_s_long: np.ndarray,
    k: int,
    engine: Engine,
    params: AttentionParams,
    no_context: np.ndarray | None = None,
    categories: np.ndarray | None = None,
    target_category: int | None = None,
) -> np.ndarray:
    """Long-term interest for a single target: retrieve top-k rows, then attend over them.

    An empty retrieval (only possible for the category engine) returns
    ``no_context`` (zeros when not given).
    """
    E_t = np.atleast_2d(np.asarray(E_t, dtype=DTYPE))
    E_s_long = np.asarray(E_s_long, dtype=DTYPE)
    if E_s_long.ndim != 2 or E_s_long.shape[0] == 0:
        raise EmptySequenceError(f"long sequence must be non-empty, got shape {E_s_long.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = E_s_long.shape[0]
    kw = {}
    if engine.name == "hard":
        kw = dict(target_cats=np.array([target_category]), seq_cats=np.asarray(categories)[None, :])
    nc = np.zeros(params.d) if no_context is None else no_context
    out, _ = lti_forward(E_t, E_s_long[None], np.array([n]), k, engine, params, nc, **kw)
    return out[0]

