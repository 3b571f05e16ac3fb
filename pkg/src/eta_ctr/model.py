"""The CTR network: embeddings, short/long behavior branches, MLP and training.

Every sequence entry and the target are represented as item embedding plus
category embedding.  The MLP sees
``[long interest, short interest, user, context, target]``.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from eta_ctr import attention as att
from eta_ctr.data import Batch, Instance, Vocab, collate
from eta_ctr.hashing import HashPlanes, new_planes
from eta_ctr.numeric import DTYPE, NumericError, Params, linear, linear_backward, relu, relu_backward, sigmoid
from eta_ctr.retrieval import FingerprintStore, freeze_fingerprints

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CLAMP = 1e-7

# variant -> long-branch wiring
VARIANTS = {
    "short-only": None,
    "long-avg": "avg",
    "eta": "eta",
    "eta-frozen": "eta-frozen",
    "exact-topk": "exact",
    "full-ta": "full",
    "hard": "hard",
}
ENGINE_VARIANT = {"eta": "eta", "exact": "exact-topk", "hard": "hard", "eta-frozen": "eta-frozen"}

TABLES = ("emb.item", "emb.category", "emb.user", "emb.context")


class ConfigError(ValueError):
    pass


class LookupError_(KeyError):
    """An id fell outside its embedding table."""


class CheckpointError(ValueError):
    pass


class TrainingAborted(NumericError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    S: int = 8
    L: int = 128
    k: int = 16
    m: int = 64
    heads: int = 2
    mlp_widths: tuple[int, ...] = (64, 32)
    variant: str = "eta"
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 256
    hash_rule: str = "projection"
    init_scale: float = 0.1

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.k < 1 or self.k > self.L:
            raise ConfigError(f"k must satisfy 1 <= k <= L, got k={self.k}, L={self.L}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.d < 1 or self.S < 1 or self.heads < 1 or self.batch_size < 1:
            raise ConfigError("d, S, heads and batch_size must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp_widths"] = list(self.mlp_widths)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "mlp_widths" in raw:
            raw["mlp_widths"] = tuple(int(w) for w in raw["mlp_widths"])
        return cls(**raw)


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ model


def _init_params(cfg: ModelConfig, vocab: Vocab, rng: np.random.Generator) -> Params:
    d = cfg.d
    s = cfg.init_scale
    p: Params = {
        "emb.item": rng.normal(0.0, s, (vocab.n_items, d)),
        "emb.category": rng.normal(0.0, s, (vocab.n_categories, d)),
        "emb.user": rng.normal(0.0, s, (vocab.n_users, d)),
        "emb.context": rng.normal(0.0, s, (vocab.n_contexts, d)),
    }
    short = att.init_attention(rng, d, cfg.heads)
    p.update({f"short.{k}": v for k, v in short.as_dict().items()})
    p["short.no_context"] = np.zeros(d)
    # the long-branch draw happens for every variant so the shared tensors match across variants
    long = att.init_attention(rng, d, cfg.heads)
    wiring = VARIANTS[cfg.variant]
    if wiring is not None:
        if wiring != "avg":
            p.update({f"long.{k}": v for k, v in long.as_dict().items()})
        p["long.no_context"] = np.zeros(d)
    widths = (5 * d,) + tuple(cfg.mlp_widths) + (1,)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"mlp.W{i}"] = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
        p[f"mlp.b{i}"] = np.zeros(b)
    return {k: np.ascontiguousarray(v, dtype=DTYPE) for k, v in p.items()}


@dataclass
class EtaModel:
    """Parameters plus the non-trainable state needed for retrieval."""

    cfg: ModelConfig
    vocab: Vocab
    params: Params
    planes: HashPlanes
    frozen: FingerprintStore | None = None
    step: int = 0

    @property
    def wiring(self) -> str | None:
        return VARIANTS[self.cfg.variant]

    @property
    def n_layers(self) -> int:
        return len(self.cfg.mlp_widths) + 1

    def item_representations(self) -> np.ndarray:
        """item + category embedding for every item id, using its canonical category."""
        return self.params["emb.item"] + self.params["emb.category"][self.vocab.item_category]

    def refresh_frozen(self) -> None:
        self.frozen = freeze_fingerprints(self.item_representations(), self.planes)

    def engine(self) -> att.Engine | None:
        w = self.wiring
        if w in (None, "avg"):
            return None
        if w == "eta-frozen":
            return att.Engine("eta-frozen", planes=self.planes, store=self.frozen)
        if w == "eta":
            return att.Engine("eta", planes=self.planes)
        return att.Engine(w)

    def n_params(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    # -------------------------------------------------------- forward/back

    def _check_ids(self, batch: Batch) -> None:
        checks = (
            ("emb.user", batch.user, self.vocab.n_users),
            ("emb.item", batch.target_item, self.vocab.n_items),
            ("emb.category", batch.target_cat, self.vocab.n_categories),
            ("emb.context", batch.context, self.vocab.n_contexts),
            ("emb.item", batch.short_items, self.vocab.n_items),
            ("emb.category", batch.short_cats, self.vocab.n_categories),
            ("emb.item", batch.long_items, self.vocab.n_items),
            ("emb.category", batch.long_cats, self.vocab.n_categories),
        )
        for table, ids, n in checks:
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise LookupError_(f"id {int(ids.max() if ids.max() >= n else ids.min())} out of range for {table} (size {n})")

    def _seq(self, items: np.ndarray, cats: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mask = np.arange(items.shape[1])[None, :] < lengths[:, None]
        X = self.params["emb.item"][items] + self.params["emb.category"][cats]
        return np.where(mask[:, :, None], X, 0.0), mask

    def forward(self, batch: Batch, keep: bool = False):
        """Click probabilities for ``batch``; with ``keep`` also the backward cache."""
        self._check_ids(batch)
        p = self.params
        e_t = p["emb.item"][batch.target_item] + p["emb.category"][batch.target_cat]
        e_u = p["emb.user"][batch.user]
        e_c = p["emb.context"][batch.context]

        Xs, _ = self._seq(batch.short_items, batch.short_cats, batch.short_len)
        short_params = att.AttentionParams.from_dict(p, "short.")
        short_out, short_cache = att.lti_forward(
            e_t, Xs, batch.short_len, self.cfg.S, att.Engine("full"), short_params, p["short.no_context"]
        )

        long_cache = None
        w = self.wiring
        if w is None:
            long_out = np.zeros_like(e_t)
        else:
            Xl, lmask = self._seq(batch.long_items, batch.long_cats, batch.long_len)
            if w == "avg":
                cnt = batch.long_len.astype(DTYPE)
                mean = Xl.sum(axis=1) / np.maximum(cnt, 1.0)[:, None]
                empty = batch.long_len == 0
                long_out = np.where(empty[:, None], p["long.no_context"][None, :], mean)
                long_cache = (cnt, empty)
            else:
                long_params = att.AttentionParams.from_dict(p, "long.")
                long_out, long_cache = att.lti_forward(
                    e_t, Xl, batch.long_len, self.cfg.k, self.engine(), long_params, p["long.no_context"],
                    target_cats=batch.target_cat, seq_cats=batch.long_cats,
                    target_ids=batch.target_item, seq_ids=batch.long_items,
                )

        h = np.concatenate([long_out, short_out, e_u, e_c, e_t], axis=1)
        acts = [h]
        pre = []
        for i in range(self.n_layers):
            z = linear(acts[-1], p[f"mlp.W{i}"], p[f"mlp.b{i}"])
            pre.append(z)
            if i < self.n_layers - 1:
                acts.append(relu(z))
        logit = pre[-1][:, 0]
        prob = sigmoid(logit)
        if not keep:
            return prob
        return prob, (batch, short_cache, long_cache, acts, pre, prob)

    def backward(self, cache, dlogit: np.ndarray) -> Params:
        batch, short_cache, long_cache, acts, pre, prob = cache
        p = self.params
        d = self.cfg.d
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dz = dlogit[:, None]
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                dz = relu_backward(pre[i], dz)
            dx, grads[f"mlp.W{i}"], grads[f"mlp.b{i}"] = linear_backward(acts[i], p[f"mlp.W{i}"], dz)
            dz = dx
        dh = dz
        d_long, d_short, d_user, d_ctx, d_t = (dh[:, j * d:(j + 1) * d] for j in range(5))

        np.add.at(grads["emb.user"], batch.user, d_user)
        np.add.at(grads["emb.context"], batch.context, d_ctx)

        dq, dXs, sg, dnc = att.lti_backward(short_cache, d_short)
        for k, v in sg.items():
            grads[f"short.{k}"] = v
        grads["short.no_context"] = dnc
        d_t = d_t + dq
        self._scatter_seq(grads, batch.short_items, batch.short_cats, dXs)

        w = self.wiring
        if w == "avg":
            cnt, empty = long_cache
            grads["long.no_context"] = d_long[empty].sum(axis=0)
            dmean = np.where(empty[:, None], 0.0, d_long) / np.maximum(cnt, 1.0)[:, None]
            mask = np.arange(batch.long_items.shape[1])[None, :] < batch.long_len[:, None]
            dXl = np.where(mask[:, :, None], dmean[:, None, :], 0.0)
            self._scatter_seq(grads, batch.long_items, batch.long_cats, dXl)
        elif w is not None:
            dq, dXl, lg, dnc = att.lti_backward(long_cache, d_long)
            for k, v in lg.items():
                grads[f"long.{k}"] = v
            grads["long.no_context"] = dnc
            d_t = d_t + dq
            self._scatter_seq(grads, batch.long_items, batch.long_cats, dXl)

        np.add.at(grads["emb.item"], batch.target_item, d_t)
        np.add.at(grads["emb.category"], batch.target_cat, d_t)
        return grads

    @staticmethod
    def _scatter_seq(grads: Params, items: np.ndarray, cats: np.ndarray, dX: np.ndarray) -> None:
        nz = np.any(dX != 0.0, axis=2)
        if not nz.any():
            return
        np.add.at(grads["emb.item"], items[nz], dX[nz])
        np.add.at(grads["emb.category"], cats[nz], dX[nz])

    def loss_and_grads(self, batch: Batch) -> tuple[float, Params, np.ndarray]:
        prob, cache = self.forward(batch, keep=True)
        y = batch.label.astype(DTYPE)
        value = loss(prob, y)
        inside = (prob > CLAMP) & (prob < 1.0 - CLAMP)
        dlogit = np.where(inside, prob - y, 0.0) / len(y)
        return value, self.backward(cache, dlogit), prob

    def predict(self, instances: Sequence[Instance] | Batch, batch_size: int = 1024) -> np.ndarray:
        batch = instances if isinstance(instances, Batch) else collate(instances, self.cfg.S, self.cfg.L)
        out = [self.forward(batch.take(slice(i, i + batch_size))) for i in range(0, len(batch), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)


def build_variant(cfg: ModelConfig, variant: str | None, vocab: Vocab) -> EtaModel:
    """Fresh model whose long branch is wired as ``variant`` (defaults to ``cfg.variant``)."""
    if variant is not None:
        cfg = replace(cfg, variant=variant)
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    init_seq, plane_seq = ss.spawn(2)
    params = _init_params(cfg, vocab, np.random.default_rng(init_seq))
    planes = new_planes(cfg.d, cfg.m, int(plane_seq.generate_state(1)[0]), rule=cfg.hash_rule)
    model = EtaModel(cfg=cfg, vocab=vocab, params=params, planes=planes)
    if VARIANTS[cfg.variant] == "eta-frozen":
        model.refresh_frozen()
    return model


def forward(model: EtaModel, inst: Instance) -> float:
    return float(model.forward(collate([inst], model.cfg.S, model.cfg.L))[0])


def loss(probs, labels) -> float:
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(probs, dtype=DTYPE)
    y = np.asarray(labels, dtype=DTYPE)
    if p.shape != y.shape:
        raise ValueError(f"{p.shape[0] if p.ndim else 0} probabilities vs {y.shape[0] if y.ndim else 0} labels")
    if p.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# --------------------------------------------------------------- optimizer


@dataclass
class Adam:
    """Adam with lazy row updates for embedding tables.

    Dense tensors are updated every step.  Table rows are updated only when
    the batch produced a nonzero gradient for them.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v, w = self.m[name], self.v[name], params[name]
            if name in TABLES:
                rows = np.flatnonzero(np.any(g != 0.0, axis=1))
                if len(rows) == 0:
                    continue
                gr = g[rows]
                m[rows] = b1 * m[rows] + (1 - b1) * gr
                v[rows] = b2 * v[rows] + (1 - b2) * gr * gr
                w[rows] -= self.lr * (m[rows] / corr1) / (np.sqrt(v[rows] / corr2) + self.eps)
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                w -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def train_step(model: EtaModel, batch: Batch, opt: Adam) -> float:
    """One Adam update on ``batch``; returns the batch loss before the update."""
    if len(batch) == 0:
        raise ValueError("train_step needs a non-empty batch")
    value, grads, _ = model.loss_and_grads(batch)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingAborted(f"non-finite loss or gradient at step {model.step} (loss={value})")
    opt.step(model.params, grads)
    model.step += 1
    return value


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float | None
    val_loss: float | None


def fit(
    model: EtaModel,
    train: Sequence[Instance],
    val: Sequence[Instance] | None = None,
    epochs: int = 10,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    keep_best: bool = True,
) -> list[EpochRecord]:
    """Shuffled mini-batch training; restores the best-validation parameters when ``keep_best``."""
    from eta_ctr.evaluation import auc, UndefinedMetricError

    cfg = model.cfg
    opt = Adam(lr=cfg.learning_rate)
    full = collate(train, cfg.S, cfg.L)
    val_batch = collate(val, cfg.S, cfg.L) if val else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history: list[EpochRecord] = []
    best = (-np.inf, None)
    for epoch in range(epochs):
        order = rng.permutation(len(full))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            losses.append(train_step(model, full.take(order[i:i + cfg.batch_size]), opt))
        val_auc = val_loss = None
        if val_batch is not None and len(val_batch):
            probs = model.predict(val_batch)
            val_loss = loss(probs, val_batch.label)
            try:
                val_auc = auc(probs, val_batch.label)
            except UndefinedMetricError:
                val_auc = None
        rec = EpochRecord(epoch, float(np.mean(losses)), val_auc, val_loss)
        history.append(rec)
        log.info("epoch %d loss %.5f val_auc %s", epoch, rec.train_loss, val_auc)
        if on_epoch:
            on_epoch(rec)
        score = val_auc if val_auc is not None else -rec.train_loss
        if keep_best and score > best[0]:
            best = (score, {k: v.copy() for k, v in model.params.items()})
    if keep_best and best[1] is not None:
        model.params = best[1]
    return history


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model: EtaModel, path: str | Path, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": {
            "n_users": model.vocab.n_users,
            "n_items": model.vocab.n_items,
            "n_categories": model.vocab.n_categories,
            "n_contexts": model.vocab.n_contexts,
        },
        "seed": model.cfg.seed,
        "step": model.step,
        "plane_seed": model.planes.seed,
        "config_hash": config_hash(model.cfg.to_dict()),
    }
    if extra:
        meta.update(extra)
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["state/item_category"] = model.vocab.item_category
    arrays["state/planes"] = model.planes.planes
    if model.frozen is not None:
        arrays["state/frozen"] = np.asarray(model.frozen.words)
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> EtaModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        if expect is not None and expect != cfg:
            diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict()[k] != v)
            raise CheckpointError(f"checkpoint config differs from expected in {diff}")
        vocab = Vocab(item_category=z["state/item_category"].copy(), **meta["vocab"])
        ref = _init_params(cfg, vocab, np.random.default_rng(0))
        params = {}
        for name, shape_ref in ref.items():
            key = f"param/{name}"
            if key not in z:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            arr = z[key].copy()
            if arr.shape != shape_ref.shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, config implies {shape_ref.shape}")
            params[name] = arr
        planes = HashPlanes(d=cfg.d, m=cfg.m, seed=meta["plane_seed"], planes=z["state/planes"].copy(), rule=cfg.hash_rule)
        frozen = FingerprintStore(words=z["state/frozen"].copy(), m=cfg.m) if "state/frozen" in z else None
    return EtaModel(cfg=cfg, vocab=vocab, params=params, planes=planes, frozen=frozen, step=meta.get("step", 0))
