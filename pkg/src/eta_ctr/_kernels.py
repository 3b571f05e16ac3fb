"""Compiled XOR/popcount kernels and bounded-integer top-k selection.

Fingerprints are rows of uint64 words.  Selection order is ascending
hamming distance, ties resolved toward the larger sequence index.
"""
from __future__ import annotations

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic


@intrinsic
def _ctpop64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@intrinsic
def _cttz64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.cttz", [ir.IntType(64), ir.IntType(1)])
        return builder.call(fn, [args[0], ir.Constant(ir.IntType(1), 0)])

    return sig, codegen


@njit(cache=True, boundscheck=False)
def popcount_words(words):
    out = np.empty(words.shape[0], np.int64)
    for i in range(words.shape[0]):
        s = 0
        for w in range(words.shape[1]):
            s += _ctpop64(words[i, w])
        out[i] = s
    return out


@njit(cache=True, boundscheck=False)
def hamming_matrix(a, b):
    """All-pairs hamming distances between rows of ``a`` (A, W) and ``b`` (B, W)."""
    n_a = a.shape[0]
    n_b = b.shape[0]
    n_w = a.shape[1]
    out = np.empty((n_a, n_b), np.int32)
    for i in range(n_a):
        for j in range(n_b):
            s = 0
            for w in range(n_w):
                s += _ctpop64(a[i, w] ^ b[j, w])
            out[i, j] = s
    return out


@njit(inline="always", boundscheck=False)
def _place(dist, n, kk, t, hist, off, cand, buf, masks, out_idx, out_dist):
    """Write the ``kk`` best positions given threshold ``t`` (count(dist <= t) >= kk)."""
    # compaction of positions with dist <= t through 64-bit masks
    t32 = np.int32(t)
    n_full = n // 64
    for ch in range(n_full):
        blk = dist[ch * 64:(ch + 1) * 64]
        mm = np.uint64(0)
        for j in range(64):
            mm |= np.uint64(blk[j] <= t32) << np.uint64(j)
        masks[ch] = mm
    n_chunks = n_full
    if n % 64:
        mm = np.uint64(0)
        for j in range(n - n_full * 64):
            mm |= np.uint64(dist[n_full * 64 + j] <= t32) << np.uint64(j)
        masks[n_full] = mm
        n_chunks += 1
    nc = 0
    for ch in range(n_chunks):
        mm = masks[ch]
        while mm:
            cand[nc] = ch * 64 + np.int64(_cttz64(mm))
            nc += 1
            mm &= mm - np.uint64(1)

    for q in range(t + 1):
        hist[q] = 0
    for j in range(nc):
        hist[dist[cand[j]]] += 1
    c = 0
    for q in range(t + 1):
        off[q] = c
        c += hist[q]
    # counting sort of every candidate, newest first within a bin; the first kk are the answer
    for jj in range(nc):
        i = cand[nc - 1 - jj]
        q = dist[i]
        pos = off[q]
        buf[pos] = i
        off[q] = pos + 1
    for j in range(kk):
        i = buf[j]
        out_idx[j] = i
        out_dist[j] = dist[i]


@njit(inline="always", boundscheck=False)
def _select_row(dist, n, k, m, hist, off, cand, buf, masks, out_idx, out_dist):
    # dist[i] > m marks an ineligible slot; hist has m + 2 bins
    for q in range(m + 2):
        hist[q] = 0
    for i in range(n):
        d = dist[i]
        if d > m:
            d = m + 1
        hist[d] += 1
    kk = min(k, n - hist[m + 1])
    if kk <= 0:
        return 0
    acc = 0
    t = 0
    while acc + hist[t] < kk:
        acc += hist[t]
        t += 1
    _place(dist, n, kk, t, hist, off, cand, buf, masks, out_idx, out_dist)
    return kk


@njit(inline="always", boundscheck=False)
def _count_pair(dist, n, t):
    # (count of dist < t, count of dist <= t) in one vectorizable pass
    below = 0
    upto = 0
    t32 = np.int32(t)
    for i in range(n):
        d = dist[i]
        below += d < t32
        upto += d <= t32
    return below, upto


@njit(cache=True, boundscheck=False)
def topk_shared(queries, keys_t, k, m):
    """Top-k per query against one shared key set.

    ``queries`` is (B, W); ``keys_t`` is the transposed key matrix (W, L).
    Returns (indices (B, k), distances (B, k), counts (B,)).
    """
    n_q = queries.shape[0]
    n_w = keys_t.shape[0]
    n = keys_t.shape[1]
    kk = min(k, n)
    out_idx = np.full((n_q, k), -1, np.int64)
    out_dist = np.full((n_q, k), -1, np.int32)
    counts = np.full(n_q, kk, np.int64)
    dist = np.empty(n, np.int32)
    hist = np.empty(m + 2, np.int32)
    off = np.empty(m + 2, np.int64)
    cand = np.empty(n, np.int64)
    buf = np.empty(n, np.int64)
    masks = np.empty((n + 63) // 64, np.uint64)
    if kk == 0:
        counts[:] = 0
        return out_idx, out_dist, counts
    # neighbouring queries tend to share a threshold, so walk from the last one
    t_prev = m // 2
    for b in range(n_q):
        q0 = queries[b, 0]
        for i in range(n):
            dist[i] = np.int32(_ctpop64(q0 ^ keys_t[0, i]))
        for w in range(1, n_w):
            qw = queries[b, w]
            for i in range(n):
                dist[i] += np.int32(_ctpop64(qw ^ keys_t[w, i]))
        t = t_prev
        while True:
            below, upto = _count_pair(dist, n, t)
            if below >= kk:
                t -= 1
            elif upto < kk:
                t += 1
            else:
                break
        t_prev = t
        _place(dist, n, kk, t, hist, off, cand, buf, masks, out_idx[b], out_dist[b])
    return out_idx, out_dist, counts


@njit(cache=True, boundscheck=False)
def topk_rows(queries, keys, lengths, k, m):
    """Top-k where every query has its own padded key set.

    ``queries`` is (N, W), ``keys`` is (N, L, W) and only the first
    ``lengths[r]`` keys of row ``r`` are eligible.
    """
    n_q = queries.shape[0]
    n = keys.shape[1]
    n_w = keys.shape[2]
    out_idx = np.full((n_q, k), -1, np.int64)
    out_dist = np.full((n_q, k), -1, np.int32)
    counts = np.empty(n_q, np.int64)
    dist = np.empty(n, np.int32)
    hist = np.empty(m + 2, np.int64)
    off = np.empty(m + 2, np.int64)
    cand = np.empty(n, np.int64)
    buf = np.empty(n, np.int64)
    masks = np.empty((n + 63) // 64, np.uint64)
    for r in range(n_q):
        ln = lengths[r]
        for i in range(ln):
            s = 0
            for w in range(n_w):
                s += _ctpop64(queries[r, w] ^ keys[r, i, w])
            dist[i] = np.int32(s)
        counts[r] = _select_row(dist, ln, k, m, hist, off, cand, buf, masks, out_idx[r], out_dist[r])
    return out_idx, out_dist, counts
