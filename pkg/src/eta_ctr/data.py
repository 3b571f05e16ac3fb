"""Behavior logs, labeled instances and the synthetic long-interest generator.

Sequences are stored oldest to newest.  For one instance the short sequence
holds the ``S`` most recent behaviors before the target and the long sequence
holds up to ``L`` behaviors older than those.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BEHAVIOR_CODES = {"pv": 0, "buy": 1, "cart": 2, "fav": 3}
CLICK = BEHAVIOR_CODES["pv"]
INSTANCE_HEADER = "# eta-instances v1"
N_CONTEXTS = 24


class DataConfigError(ValueError):
    pass


class TaobaoFormatError(ValueError):
    pass


# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class Instance:
    user_id: int
    target_item: int
    target_category: int
    context: int
    short_items: tuple[int, ...]
    short_cats: tuple[int, ...]
    long_items: tuple[int, ...]
    long_cats: tuple[int, ...]
    label: int
    timestamp: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataConfigError(f"label must be 0 or 1, got {self.label}")
        if len(self.short_items) != len(self.short_cats) or len(self.long_items) != len(self.long_cats):
            raise DataConfigError("item and category sequences differ in length")


@dataclass
class BehaviorLog:
    """Columnar behavior rows with dense ids.

    ``*_raw`` arrays map a dense id back to the original identifier and
    ``item_category`` gives one category per dense item id.
    """

    user: np.ndarray
    item: np.ndarray
    category: np.ndarray
    behavior: np.ndarray
    timestamp: np.ndarray
    item_category: np.ndarray
    users_raw: np.ndarray | None = None
    items_raw: np.ndarray | None = None
    categories_raw: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.user)

    @property
    def n_users(self) -> int:
        return int(self.user.max()) + 1 if len(self.user) else 0

    @property
    def n_items(self) -> int:
        return len(self.item_category)

    @property
    def n_categories(self) -> int:
        return int(self.item_category.max()) + 1 if len(self.item_category) else 0

    def save_vocab(self, path: str | Path) -> None:
        arrays = {"item_category": self.item_category}
        for name in ("users_raw", "items_raw", "categories_raw"):
            value = getattr(self, name)
            if value is not None:
                arrays[name] = np.asarray(value)
        np.savez(path, **arrays)


@dataclass(frozen=True)
class Vocab:
    n_users: int
    n_items: int
    n_categories: int
    n_contexts: int
    item_category: np.ndarray = field(repr=False, compare=False)


@dataclass
class Splits:
    train: list[Instance]
    val: list[Instance]
    test: list[Instance]
    vocab: Vocab
    stats: dict = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


# ------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the planted-interest generator.

    Categories are partitioned into clusters of ``categories_per_cluster``.
    Each user draws ``interest_clusters_per_user`` clusters; the first
    ``long_only_clusters`` appear only in the long history, the rest also
    drive the short history.  Within a cluster a user browses only
    ``history_categories_per_cluster`` categories, while targets may come from
    any category of the cluster.
    """

    n_users: int = 2000
    n_items: int = 10000
    n_categories: int = 200
    interest_clusters_per_user: int = 4
    long_only_clusters: int = 2
    categories_per_cluster: int = 8
    history_categories_per_cluster: int = 2
    seq_length_min: int = 32
    seq_length_median: int = 128
    seq_length_max: int = 256
    focus: float = 0.8
    targets_per_user: int = 4
    signal_strength: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        for key in ("n_users", "n_items", "n_categories", "interest_clusters_per_user", "categories_per_cluster",
                    "history_categories_per_cluster", "seq_length_min", "targets_per_user"):
            if getattr(self, key) < 1:
                raise DataConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        n_clusters = self.n_categories // self.categories_per_cluster
        if self.interest_clusters_per_user > n_clusters:
            raise DataConfigError(
                f"interest_clusters_per_user={self.interest_clusters_per_user} exceeds the "
                f"{n_clusters} clusters available from n_categories={self.n_categories}"
            )
        if self.interest_clusters_per_user >= n_clusters:
            raise DataConfigError("interest_clusters_per_user leaves no cluster for negative targets")
        if not 0 <= self.long_only_clusters <= self.interest_clusters_per_user:
            raise DataConfigError("long_only_clusters must lie in [0, interest_clusters_per_user]")
        if self.history_categories_per_cluster > self.categories_per_cluster:
            raise DataConfigError("history_categories_per_cluster exceeds categories_per_cluster")
        if self.n_items < self.n_categories:
            raise DataConfigError("n_items must be at least n_categories")
        if not self.seq_length_min <= self.seq_length_median <= self.seq_length_max:
            raise DataConfigError("need seq_length_min <= seq_length_median <= seq_length_max")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise DataConfigError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        if not 0.0 <= self.focus <= 1.0:
            raise DataConfigError(f"focus must lie in [0, 1], got {self.focus}")


@dataclass
class SyntheticData:
    log: BehaviorLog
    instances: list[Instance]
    vocab: Vocab
    clusters: np.ndarray  # category -> cluster id
    long_clusters: list[frozenset[int]]  # per user, clusters planted only in the long history
    target_cluster: np.ndarray  # per instance

    def oracle_scores(self) -> np.ndarray:
        """1.0 where the target's cluster is one of the user's long-only clusters."""
        return np.array(
            [float(c in self.long_clusters[inst.user_id]) for inst, c in zip(self.instances, self.target_cluster)]
        )


def generate(spec: SyntheticSpec, short_length: int = 8, long_length: int = 128) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_cats = spec.n_categories
    item_category = rng.permutation(np.arange(spec.n_items) % n_cats)
    items_by_cat = [np.flatnonzero(item_category == c) for c in range(n_cats)]
    n_clusters = n_cats // spec.categories_per_cluster
    cat_perm = rng.permutation(n_cats)
    cluster_cats = cat_perm[: n_clusters * spec.categories_per_cluster].reshape(n_clusters, -1)
    clusters = np.full(n_cats, -1, dtype=np.int64)
    for cl, cats in enumerate(cluster_cats):
        clusters[cats] = cl
    sigma = 0.5
    base_time = 1_500_000_000

    rows_u, rows_i, rows_c, rows_t = [], [], [], []
    instances: list[Instance] = []
    long_clusters: list[frozenset[int]] = []
    target_cluster: list[int] = []
    user_time = rng.integers(0, 30 * 86400, size=spec.n_users)

    def pick_item(cat: int) -> int:
        pool = items_by_cat[cat]
        return int(pool[rng.integers(len(pool))])

    for u in range(spec.n_users):
        chosen = rng.choice(n_clusters, size=spec.interest_clusters_per_user, replace=False)
        long_only = chosen[: spec.long_only_clusters]
        recent = chosen[spec.long_only_clusters:]
        engaged = {
            int(cl): rng.choice(cluster_cats[cl], size=spec.history_categories_per_cluster, replace=False)
            for cl in chosen
        }
        long_only_cats = set(np.concatenate([cluster_cats[cl] for cl in long_only]).tolist()) if len(long_only) else set()
        quiet_cats = np.array([c for c in range(n_cats) if c not in long_only_cats])

        n_long = int(np.clip(round(spec.seq_length_median * math.exp(sigma * rng.standard_normal())),
                             spec.seq_length_min, spec.seq_length_max))
        history: list[tuple[int, int]] = []
        for _ in range(n_long):
            if rng.random() < spec.focus:
                cl = int(chosen[rng.integers(len(chosen))])
                cat = int(engaged[cl][rng.integers(len(engaged[cl]))])
                item = pick_item(cat)
            else:
                item = int(rng.integers(spec.n_items))
            history.append((item, int(item_category[item])))
        for _ in range(short_length):
            if len(recent) and rng.random() < spec.focus:
                cl = int(recent[rng.integers(len(recent))])
                cat = int(engaged[cl][rng.integers(len(engaged[cl]))])
            else:
                cat = int(quiet_cats[rng.integers(len(quiet_cats))])
            item = pick_item(cat)
            history.append((item, cat))

        t_req = base_time + 86400 + int(user_time[u])
        n_hist = len(history)
        for pos, (item, cat) in enumerate(history):
            rows_u.append(u)
            rows_i.append(item)
            rows_c.append(cat)
            rows_t.append(t_req - (n_hist - pos) * 60)

        short = history[-short_length:] if short_length else []
        older = history[: n_hist - len(short)]
        long = older[-long_length:] if long_length else []
        outside = np.setdiff1d(np.arange(n_clusters), chosen)
        for j in range(spec.targets_per_user):
            inside = j % 2 == 0 and len(long_only) > 0
            cl = int(long_only[rng.integers(len(long_only))]) if inside else int(outside[rng.integers(len(outside))])
            cat = int(cluster_cats[cl][rng.integers(spec.categories_per_cluster)])
            item = pick_item(cat)
            p_click = (1 + spec.signal_strength) / 2 if inside else (1 - spec.signal_strength) / 2
            label = int(rng.random() < p_click)
            instances.append(
                Instance(
                    user_id=u,
                    target_item=item,
                    target_category=cat,
                    context=int(rng.integers(N_CONTEXTS)),
                    short_items=tuple(i for i, _ in short),
                    short_cats=tuple(c for _, c in short),
                    long_items=tuple(i for i, _ in long),
                    long_cats=tuple(c for _, c in long),
                    label=label,
                    timestamp=t_req,
                )
            )
            target_cluster.append(cl)
        long_clusters.append(frozenset(int(c) for c in long_only))

    log = BehaviorLog(
        user=np.array(rows_u, dtype=np.int64),
        item=np.array(rows_i, dtype=np.int64),
        category=np.array(rows_c, dtype=np.int64),
        behavior=np.zeros(len(rows_u), dtype=np.int64),
        timestamp=np.array(rows_t, dtype=np.int64),
        item_category=item_category.astype(np.int64),
    )
    vocab = Vocab(spec.n_users, spec.n_items, n_cats, N_CONTEXTS, item_category.astype(np.int64))
    return SyntheticData(log, instances, vocab, clusters, long_clusters, np.array(target_cluster))


# ------------------------------------------------------------------ Taobao


def ingest_taobao(path: str | Path, max_users: int | None = None, max_rows: int | None = None) -> BehaviorLog:
    """Parse a headerless UserBehavior CSV (user, item, category, behavior, timestamp).

    Malformed rows are skipped and counted in ``log.stats``.  Ids are
    remapped to dense integers in sorted order of the original ids and rows
    are sorted by (user, timestamp), keeping file order among ties.
    """
    users, items, cats, behaviors, stamps = [], [], [], [], []
    seen_users: set[int] = set()
    n_read = n_bad = n_user_capped = 0
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if max_rows is not None and n_read >= max_rows:
                break
            n_read += 1
            try:
                if len(row) != 5:
                    raise ValueError(row)
                u, i, c, ts = int(row[0]), int(row[1]), int(row[2]), int(row[4])
                b = BEHAVIOR_CODES[row[3].strip()]
            except (ValueError, KeyError):
                n_bad += 1
                continue
            if max_users is not None and u not in seen_users:
                if len(seen_users) >= max_users:
                    n_user_capped += 1
                    continue
                seen_users.add(u)
            users.append(u)
            items.append(i)
            cats.append(c)
            behaviors.append(b)
            stamps.append(ts)
    if n_read and n_bad / n_read > 0.5:
        raise TaobaoFormatError(f"{n_bad} of {n_read} rows in {path} are malformed")

    users_raw, user = np.unique(np.array(users, dtype=np.int64), return_inverse=True)
    items_raw, item = np.unique(np.array(items, dtype=np.int64), return_inverse=True)
    cats_raw, cat = np.unique(np.array(cats, dtype=np.int64), return_inverse=True)
    behavior = np.array(behaviors, dtype=np.int64)
    ts = np.array(stamps, dtype=np.int64)
    order = np.lexsort((np.arange(len(user)), ts, user))
    user, item, cat, behavior, ts = user[order], item[order], cat[order], behavior[order], ts[order]

    item_category = np.zeros(len(items_raw), dtype=np.int64)
    first = np.unique(item, return_index=True)[1]
    item_category[item[first]] = cat[first]
    return BehaviorLog(
        user=user.astype(np.int64),
        item=item.astype(np.int64),
        category=cat.astype(np.int64),
        behavior=behavior,
        timestamp=ts,
        item_category=item_category,
        users_raw=users_raw,
        items_raw=items_raw,
        categories_raw=cats_raw,
        stats={"rows_read": n_read, "malformed": n_bad, "user_capped": n_user_capped, "rows_kept": len(user)},
    )


def _hour_bucket(ts: int) -> int:
    return int((ts // 3600) % N_CONTEXTS)


def make_instances(
    log: BehaviorLog,
    S: int,
    L: int,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Splits:
    """One positive and one same-category negative per user, split chronologically.

    The positive target is the user's last click; every earlier behavior with
    a strictly smaller timestamp is a feature.  The negative is a random item
    of the target's category that the user never interacted with.
    """
    rng = np.random.default_rng(seed)
    items_by_cat: dict[int, np.ndarray] = {}
    for c in np.unique(log.item_category):
        items_by_cat[int(c)] = np.flatnonzero(log.item_category == c)
    bounds = np.flatnonzero(np.diff(log.user)) + 1
    starts = np.concatenate([[0], bounds]) if len(log) else np.array([], dtype=np.int64)
    ends = np.concatenate([bounds, [len(log)]]) if len(log) else np.array([], dtype=np.int64)

    dropped = {"too_short": 0, "no_click": 0, "no_negative": 0}
    out: list[Instance] = []
    for s, e in zip(starts, ends):
        u = int(log.user[s])
        if e - s < 2:
            dropped["too_short"] += 1
            continue
        clicks = np.flatnonzero(log.behavior[s:e] == CLICK)
        if len(clicks) == 0:
            dropped["no_click"] += 1
            continue
        t_pos = s + int(clicks[-1])
        t_time = int(log.timestamp[t_pos])
        hist = np.arange(s, t_pos)
        hist = hist[log.timestamp[hist] < t_time]
        if len(hist) == 0:
            dropped["too_short"] += 1
            continue
        target = int(log.item[t_pos])
        target_cat = int(log.category[t_pos])
        pool = items_by_cat.get(int(log.item_category[target]), np.array([], dtype=np.int64))
        pool = np.setdiff1d(pool, log.item[s:e], assume_unique=False)
        if len(pool) == 0:
            dropped["no_negative"] += 1
            continue
        negative = int(pool[rng.integers(len(pool))])
        short = hist[len(hist) - min(S, len(hist)):]
        older = hist[: len(hist) - len(short)]
        long = older[len(older) - min(L, len(older)):]
        common = dict(
            user_id=u,
            context=_hour_bucket(t_time),
            short_items=tuple(int(x) for x in log.item[short]),
            short_cats=tuple(int(x) for x in log.category[short]),
            long_items=tuple(int(x) for x in log.item[long]),
            long_cats=tuple(int(x) for x in log.category[long]),
            timestamp=t_time,
        )
        out.append(Instance(target_item=target, target_category=target_cat, label=1, **common))
        out.append(
            Instance(
                target_item=negative, target_category=int(log.item_category[negative]), label=0, **common
            )
        )
    train, val, test = chronological_split(out, fractions)
    vocab = Vocab(
        n_users=log.n_users,
        n_items=log.n_items,
        n_categories=max(log.n_categories, int(log.category.max()) + 1 if len(log) else 0),
        n_contexts=N_CONTEXTS,
        item_category=log.item_category,
    )
    return Splits(train, val, test, vocab, stats={"dropped": dropped, "instances": len(out)})


def chronological_split(
    instances: Sequence[Instance], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[list[Instance], list[Instance], list[Instance]]:
    """Split by sample timestamp, keeping each (user, timestamp) request whole."""
    if not math.isclose(sum(fractions), 1.0):
        raise DataConfigError(f"split fractions must sum to 1, got {fractions}")
    groups: dict[tuple[int, int], list[Instance]] = {}
    for inst in instances:
        groups.setdefault((inst.timestamp, inst.user_id), []).append(inst)
    keys = sorted(groups)
    n = len(keys)
    cut1 = int(round(n * fractions[0]))
    cut2 = int(round(n * (fractions[0] + fractions[1])))
    parts = (keys[:cut1], keys[cut1:cut2], keys[cut2:])
    return tuple([inst for key in part for inst in groups[key]] for part in parts)  # type: ignore[return-value]


# ------------------------------------------------------------- batches & I/O


@dataclass
class Batch:
    """Padded columnar view of a list of instances.

    Sequences are left aligned; positions at or beyond ``*_len`` are padding
    with id 0.
    """

    user: np.ndarray
    target_item: np.ndarray
    target_cat: np.ndarray
    context: np.ndarray
    short_items: np.ndarray
    short_cats: np.ndarray
    short_len: np.ndarray
    long_items: np.ndarray
    long_cats: np.ndarray
    long_len: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.label)

    def take(self, idx) -> Batch:
        return Batch(**{name: value[idx] for name, value in asdict_shallow(self).items()})


def asdict_shallow(batch: Batch) -> dict[str, np.ndarray]:
    return {name: getattr(batch, name) for name in batch.__dataclass_fields__}


def _pad(seqs: Iterable[tuple[int, ...]], width: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = list(seqs)
    out = np.zeros((len(seqs), max(width, 1)), dtype=np.int64)
    lens = np.zeros(len(seqs), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = s[len(s) - min(width, len(s)):] if width else ()
        out[r, : len(s)] = s
        lens[r] = len(s)
    return out, lens


def collate(instances: Sequence[Instance], S: int, L: int) -> Batch:
    """Pad instances into a :class:`Batch`, keeping the most recent ``S``/``L`` items."""
    short_items, short_len = _pad((i.short_items for i in instances), S)
    short_cats, _ = _pad((i.short_cats for i in instances), S)
    long_items, long_len = _pad((i.long_items for i in instances), L)
    long_cats, _ = _pad((i.long_cats for i in instances), L)
    col = lambda name: np.array([getattr(i, name) for i in instances], dtype=np.int64)  # noqa: E731
    return Batch(
        user=col("user_id"),
        target_item=col("target_item"),
        target_cat=col("target_category"),
        context=col("context"),
        short_items=short_items,
        short_cats=short_cats,
        short_len=short_len,
        long_items=long_items,
        long_cats=long_cats,
        long_len=long_len,
        label=col("label"),
    )


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split()) if text else ()


def write_instances(path: str | Path, instances: Iterable[Instance]) -> int:
    """One instance per line, tab-separated:

    ``label user target_item target_category context timestamp short_items
    short_cats long_items long_cats`` where the four sequence fields are
    space-separated ids, oldest first.
    """
    n = 0
    with open(path, "w", newline="\n") as fh:
        fh.write(INSTANCE_HEADER + "\n")
        for inst in instances:
            fields = [
                inst.label, inst.user_id, inst.target_item, inst.target_category, inst.context, inst.timestamp,
                " ".join(map(str, inst.short_items)), " ".join(map(str, inst.short_cats)),
                " ".join(map(str, inst.long_items)), " ".join(map(str, inst.long_cats)),
            ]
            fh.write("\t".join(map(str, fields)) + "\n")
            n += 1
    return n


def read_instances(path: str | Path) -> list[Instance]:
    out = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != INSTANCE_HEADER:
            raise DataConfigError(f"{path}: expected header {INSTANCE_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 10:
                raise DataConfigError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            label, user, item, cat, ctx, ts = (int(x) for x in parts[:6])
            out.append(
                Instance(
                    user_id=user, target_item=item, target_category=cat, context=ctx,
                    short_items=_ints(parts[6]), short_cats=_ints(parts[7]),
                    long_items=_ints(parts[8]), long_cats=_ints(parts[9]),
                    label=label, timestamp=ts,
                )
            )
    return out


def write_vocab(path: str | Path, vocab: Vocab) -> None:
    meta = {k: v for k, v in asdict(vocab).items() if k != "item_category"}
    np.savez(path, item_category=vocab.item_category, meta=np.array(json.dumps(meta, sort_keys=True)))


def read_vocab(path: str | Path) -> Vocab:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        return Vocab(item_category=z["item_category"], **meta)
