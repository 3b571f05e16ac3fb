"""Metrics and the retrieval latency harness."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from eta_ctr import retrieval
from eta_ctr.hashing import fingerprint_batch, new_planes
from eta_ctr.numeric import DTYPE

LATENCY_FIELDS = ("latency",)
REPORT_SCHEMA_VERSION = 1


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties counted half."""
    s = np.asarray(scores, dtype=DTYPE)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def log_loss(probs, labels) -> float:
    from eta_ctr.model import loss

    return loss(probs, labels)


def _ids(x) -> set[int]:
    if isinstance(x, retrieval.RetrievalResult):
        return x.as_set()
    return {int(i) for i in np.asarray(x).ravel() if i >= 0}


def recall_at_k(approx, exact) -> float:
    """|approx ∩ exact| / |exact|; accepts results or index arrays (-1 entries ignored)."""
    a, e = _ids(approx), _ids(exact)
    if not e:
        raise UndefinedMetricError("recall against an empty exact set is undefined")
    return len(a & e) / len(e)


def mean_recall(approx_idx: np.ndarray, exact_idx: np.ndarray) -> float:
    return float(np.mean([recall_at_k(a, e) for a, e in zip(approx_idx, exact_idx)]))


# ------------------------------------------------------------------ report


@dataclass
class LatencyStats:
    mean_ns: float
    p50_ns: float
    p95_ns: float
    trials: int

    @classmethod
    def from_samples(cls, ns: Iterable[float]) -> LatencyStats:
        a = np.asarray(list(ns), dtype=DTYPE)
        return cls(float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95)), int(a.size))


@dataclass
class MetricReport:
    auc: float | None = None
    log_loss: float | None = None
    recall_at_k: dict[str, float] = field(default_factory=dict)
    latency: dict[str, LatencyStats] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")
        for name, r in self.recall_at_k.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"recall for {name} outside [0, 1]: {r}")
        for name, lat in self.latency.items():
            if min(lat.mean_ns, lat.p50_ns, lat.p95_ns) <= 0:
                raise ValueError(f"non-positive latency for {name}")

    def to_dict(self, include_latency: bool = True) -> dict:
        out = asdict(self)
        out["schema_version"] = REPORT_SCHEMA_VERSION
        if not include_latency:
            for k in LATENCY_FIELDS:
                out.pop(k)
        return out

    def to_json(self, include_latency: bool = True) -> str:
        return json.dumps(self.to_dict(include_latency), sort_keys=True)

    def write(self, path: str | Path) -> None:
        self.validate()
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, raw: dict) -> MetricReport:
        raw = dict(raw)
        raw.pop("schema_version", None)
        raw["latency"] = {k: LatencyStats(**v) for k, v in raw.get("latency", {}).items()}
        return cls(**raw)


# ------------------------------------------------------------------- bench


@dataclass
class BenchRow:
    L: int
    B: int
    d: int
    m: int
    k: int
    trials: int
    latency: dict[str, LatencyStats]
    recall: dict[str, float]

    @property
    def ratio(self) -> float:
        """hamming / exact mean latency."""
        return self.latency["eta"].mean_ns / self.latency["exact"].mean_ns

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratio"] = self.ratio
        return out


def _time_interleaved(runners: dict, trials: int) -> dict[str, list[int]]:
    """Run every engine once per trial, rotating the order, so drifting machine load hits all alike."""
    warm = max(1, trials // 10)
    names = list(runners)
    samples = {name: [] for name in names}
    for i in range(warm + trials):
        shift = i % len(names)
        for name in names[shift:] + names[:shift]:
            t0 = time.perf_counter_ns()
            runners[name](i)
            dt = time.perf_counter_ns() - t0
            if i >= warm:
                samples[name].append(max(dt, 1))
    return samples


def bench_retrieval(
    L: int = 1024, B: int = 256, d: int = 128, m: int = 128, k: int = 48, trials: int = 50, seed: int = 0,
    n_categories: int = 100,
) -> BenchRow:
    """Times hamming, exact and category top-k on one thread over ``trials`` requests.

    A request is ``B`` candidate targets against one user sequence of length
    ``L``.  Sequence fingerprints are precomputed per request (they live with
    the embedding table), target fingerprints are computed inside the timed
    region.  ``eta+hash`` additionally times fingerprinting the sequence.
    Warmup runs (10% of ``trials``, at least one) are discarded.
    """
    if min(L, B, d, m, k, trials) < 1:
        raise ValueError("bench parameters must all be >= 1")
    rng = np.random.default_rng(seed)
    planes = new_planes(d, m, int(rng.integers(2**31)))
    n_req = trials + max(1, trials // 10)
    pool = 4
    seqs = rng.standard_normal((pool, L, d))
    cats = rng.integers(0, n_categories, (pool, L))
    seq_words_t = [np.ascontiguousarray(fingerprint_batch(s, planes).T) for s in seqs]
    targets = rng.standard_normal((n_req, B, d))
    target_cats = rng.integers(0, n_categories, (n_req, B))

    def run_eta(i):
        tw = fingerprint_batch(targets[i], planes)
        return retrieval.topk_hamming_shared(tw, seq_words_t[i % pool], k, m)

    def run_eta_hash(i):
        sw = np.ascontiguousarray(fingerprint_batch(seqs[i % pool], planes).T)
        tw = fingerprint_batch(targets[i], planes)
        return retrieval.topk_hamming_shared(tw, sw, k, m)

    def run_exact(i):
        return retrieval.topk_exact_shared(targets[i], seqs[i % pool], k)

    def run_hard(i):
        return retrieval.topk_hard_shared(target_cats[i], cats[i % pool], k)

    runners = {"eta": run_eta, "eta+hash": run_eta_hash, "exact": run_exact, "hard": run_hard}
    with threadpool_limits(limits=1):
        for fn in runners.values():
            fn(0)  # compile / allocate before any timing
        samples = _time_interleaved(runners, trials)
        latency = {name: LatencyStats.from_samples(ns) for name, ns in samples.items()}
        recall_eta, recall_hard = [], []
        for i in range(min(trials, n_req)):
            ex = run_exact(i)
            recall_eta.append(mean_recall(run_eta(i), ex))
            recall_hard.append(mean_recall(run_hard(i), ex))
    recall = {"eta": float(np.mean(recall_eta)), "hard": float(np.mean(recall_hard)), "exact": 1.0}
    return BenchRow(L=L, B=B, d=d, m=m, k=k, trials=trials, latency=latency, recall=recall)


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'L':>6} {'B':>5} {'d':>4} {'m':>5} {'k':>4} {'eta_ms':>9} {'eta+hash_ms':>11} {'exact_ms':>9} {'hard_ms':>9} {'ratio':>6} {'recall':>7}"
    lines = [head]
    for r in rows:
        ms = {n: r.latency[n].mean_ns / 1e6 for n in r.latency}
        lines.append(
            f"{r.L:>6} {r.B:>5} {r.d:>4} {r.m:>5} {r.k:>4} {ms['eta']:>9.3f} {ms['eta+hash']:>11.3f} "
            f"{ms['exact']:>9.3f} {ms['hard']:>9.3f} {r.ratio:>6.3f} {r.recall['eta']:>7.3f}"
        )
    return "\n".join(lines)
