"""Command-line entry point: ``eta-ctr {gen-data,train,eval,bench}``.

Configuration is a TOML file with four optional tables:

``[model]``
    Any :class:`eta_ctr.model.ModelConfig` field.
``[data]``
    ``source`` ("synthetic" or "taobao"), ``path`` (Taobao CSV),
    ``max_users``, ``max_rows``, ``split`` (three fractions) and any
    :class:`eta_ctr.data.SyntheticSpec` field.
``[experiment]``
    ``variants`` (list of names), ``epochs``, ``seed``, ``out``.
``[bench]``
    ``L``, ``B``, ``d``, ``m``, ``k`` (each a list; the grid is their
    product), ``trials``.

Unknown keys are rejected.  ``--seed`` overrides every seed in the file.
Output goes to ``--out``, else ``experiment.out``, else
``$ETA_RESULTS_DIR/<command>``, else ``./results/<command>``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from eta_ctr import data as data_mod
from eta_ctr import evaluation, model as model_mod
from eta_ctr.numeric import NumericError

log = logging.getLogger("eta_ctr")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
RESULTS_ENV = "ETA_RESULTS_DIR"


class CliConfigError(ValueError):
    pass


DATA_EXTRA = {"source": "synthetic", "path": None, "max_users": None, "max_rows": None, "split": [0.8, 0.1, 0.1]}
EXPERIMENT_DEFAULTS = {"variants": ["eta"], "epochs": 5, "seed": 0, "out": None}
BENCH_DEFAULTS = {"L": [1024], "B": [256], "d": [128], "m": [128], "k": [48], "trials": 50}


@dataclass
class ExperimentConfig:
    model: model_mod.ModelConfig = field(default_factory=model_mod.ModelConfig)
    synthetic: data_mod.SyntheticSpec = field(default_factory=data_mod.SyntheticSpec)
    data: dict = field(default_factory=lambda: dict(DATA_EXTRA))
    experiment: dict = field(default_factory=lambda: dict(EXPERIMENT_DEFAULTS))
    bench: dict = field(default_factory=lambda: dict(BENCH_DEFAULTS))

    def resolved(self) -> dict:
        """Every value, defaults included, as plain JSON-able data."""
        return {
            "model": self.model.to_dict(),
            "data": {**asdict(self.synthetic), **self.data},
            "experiment": dict(self.experiment),
            "bench": dict(self.bench),
        }

    @property
    def hash(self) -> str:
        return model_mod.config_hash(self.resolved())

    @property
    def seed(self) -> int:
        return int(self.experiment["seed"])


def _check_keys(section: str, raw: dict, allowed) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise CliConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def build_config(raw: dict, seed: int | None = None) -> ExperimentConfig:
    _check_keys("top level", raw, ("model", "data", "experiment", "bench"))
    model_raw = dict(raw.get("model", {}))
    data_raw = dict(raw.get("data", {}))
    exp_raw = dict(raw.get("experiment", {}))
    bench_raw = dict(raw.get("bench", {}))
    model_keys = {f.name for f in fields(model_mod.ModelConfig)}
    spec_keys = {f.name for f in fields(data_mod.SyntheticSpec)}
    _check_keys("model", model_raw, model_keys)
    _check_keys("data", data_raw, spec_keys | set(DATA_EXTRA))
    _check_keys("experiment", exp_raw, EXPERIMENT_DEFAULTS)
    _check_keys("bench", bench_raw, BENCH_DEFAULTS)

    experiment = {**EXPERIMENT_DEFAULTS, **exp_raw}
    if seed is not None:
        experiment["seed"] = seed
    s = int(experiment["seed"])
    try:
        cfg = model_mod.ModelConfig.from_dict({**model_raw, "seed": s})
        cfg.validate()
        spec = data_mod.SyntheticSpec(**{k: v for k, v in data_raw.items() if k in spec_keys}, seed=s)
        spec.validate()
    except (TypeError, model_mod.ConfigError, data_mod.DataConfigError) as exc:
        raise CliConfigError(str(exc)) from exc
    extra = {**DATA_EXTRA, **{k: v for k, v in data_raw.items() if k in DATA_EXTRA}}
    if extra["source"] not in ("synthetic", "taobao"):
        raise CliConfigError(f"data.source must be 'synthetic' or 'taobao', got {extra['source']!r}")
    if extra["source"] == "taobao" and not extra["path"]:
        raise CliConfigError("data.path is required when data.source = 'taobao'")
    for name in experiment["variants"]:
        if name not in model_mod.VARIANTS:
            raise CliConfigError(f"experiment.variants: unknown variant {name!r}")
    bench = {**BENCH_DEFAULTS, **bench_raw}
    for key in ("L", "B", "d", "m", "k"):
        if isinstance(bench[key], int):
            bench[key] = [bench[key]]
    return ExperimentConfig(model=cfg, synthetic=spec, data=extra, experiment=experiment, bench=bench)


def load_config(path: str | None, seed: int | None = None) -> ExperimentConfig:
    raw = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise CliConfigError(f"{path}: {exc}") from exc
    return build_config(raw, seed)


def _out_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.experiment.get("out"):
        return Path(cfg.experiment["out"])
    root = os.environ.get(RESULTS_ENV)
    return Path(root or "results") / command


def _prepare(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_dir(args, cfg) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(os.environ.get(RESULTS_ENV) or "results") / "gen-data"


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "gen-data")
    _prepare(out, args.force)
    m = cfg.model
    if cfg.data["source"] == "synthetic":
        synth = data_mod.generate(cfg.synthetic, short_length=m.S, long_length=m.L)
        train, val, test = data_mod.chronological_split(synth.instances, tuple(cfg.data["split"]))
        vocab = synth.vocab
        stats = {}
    else:
        blog = data_mod.ingest_taobao(cfg.data["path"], max_users=cfg.data["max_users"], max_rows=cfg.data["max_rows"])
        splits = data_mod.make_instances(blog, m.S, m.L, seed=cfg.seed, fractions=tuple(cfg.data["split"]))
        train, val, test, vocab = splits.train, splits.val, splits.test, splits.vocab
        stats = {"ingest": blog.stats, **splits.stats}
    counts = {}
    for name, part in (("train", train), ("val", val), ("test", test)):
        counts[name] = data_mod.write_instances(out / f"{name}.tsv", part)
    data_mod.write_vocab(out / "vocab.npz", vocab)
    manifest = {
        "counts": counts,
        "seed": cfg.seed,
        "config_hash": cfg.hash,
        "config": cfg.resolved(),
        "stats": stats,
        "files": {p.name: _file_digest(p) for p in sorted(out.glob("*.tsv"))},
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(counts))
    return 0


def _load_split(data_dir: Path, name: str):
    path = data_dir / f"{name}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"missing instance file {path}; run gen-data first")
    return data_mod.read_instances(path)


def _variants(args, cfg) -> list[str]:
    if args.variant:
        if args.variant not in model_mod.VARIANTS:
            raise CliConfigError(f"unknown variant {args.variant!r}; expected one of {sorted(model_mod.VARIANTS)}")
        return [args.variant]
    return list(cfg.experiment["variants"])


def cmd_train(args, cfg: ExperimentConfig) -> int:
    data_dir = _data_dir(args, cfg)
    train, val = _load_split(data_dir, "train"), _load_split(data_dir, "val")
    vocab = data_mod.read_vocab(data_dir / "vocab.npz")
    out = _out_dir(args, cfg, "train")
    _prepare(out, args.force)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed}
    for variant in _variants(args, cfg):
        model = model_mod.build_variant(cfg.model, variant, vocab)
        log_path = out / f"{variant}.log.jsonl"
        ckpt = out / f"{variant}.ckpt.npz"

        with open(log_path, "w") as fh:
            best = {"auc": -np.inf}

            def on_epoch(rec, fh=fh, model=model, ckpt=ckpt, best=best):
                fh.write(json.dumps({"variant": variant, **asdict(rec), **meta}, sort_keys=True) + "\n")
                fh.flush()
                score = rec.val_auc if rec.val_auc is not None else -rec.train_loss
                if score > best["auc"]:
                    best["auc"] = score
                    model_mod.save_checkpoint(model, ckpt, extra={**meta, "epoch": rec.epoch})

            try:
                model_mod.fit(model, train, val, epochs=int(cfg.experiment["epochs"]), on_epoch=on_epoch)
            except model_mod.TrainingAborted as exc:
                fh.write(json.dumps({"variant": variant, "aborted": str(exc), **meta}) + "\n")
                raise
        print(f"{variant}: best val score {best['auc']:.4f} -> {ckpt}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    data_dir = _data_dir(args, cfg)
    test = _load_split(data_dir, "test")
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else Path(os.environ.get(RESULTS_ENV) or "results") / "train"
    out = _out_dir(args, cfg, "eval")
    _prepare(out, args.force)
    reports = {}
    for variant in _variants(args, cfg):
        expect = replace(cfg.model, variant=variant)
        model = model_mod.load_checkpoint(ckpt_dir / f"{variant}.ckpt.npz", expect=expect)
        report = evaluate(model, test, cfg)
        report.write(out / f"{variant}.report.json")
        reports[variant] = report.auc
    print(json.dumps(reports, sort_keys=True))
    return 0


def evaluate(model: model_mod.EtaModel, test, cfg: ExperimentConfig) -> evaluation.MetricReport:
    probs = model.predict(test)
    labels = np.array([i.label for i in test])
    report = evaluation.MetricReport(
        auc=evaluation.auc(probs, labels),
        log_loss=evaluation.log_loss(probs, labels),
        config=cfg.resolved(),
        seed=cfg.seed,
        config_hash=cfg.hash,
        extra={"variant": model.cfg.variant, "n_test": len(test)},
    )
    return report


def cmd_bench(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "bench")
    _prepare(out, args.force)
    b = cfg.bench
    rows = []
    for L, B, d, m, k in itertools.product(b["L"], b["B"], b["d"], b["m"], b["k"]):
        rows.append(evaluation.bench_retrieval(L=L, B=B, d=d, m=m, k=min(k, L), trials=int(b["trials"]), seed=cfg.seed))
    table = evaluation.format_table(rows)
    (out / "bench.txt").write_text(table + "\n")
    _write_json(out / "bench.json", {
        "rows": [r.to_dict() for r in rows], "seed": cfg.seed, "config_hash": cfg.hash, "config": cfg.resolved(),
    })
    print(table)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eta-ctr", description="Hash-retrieval CTR experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--variant", help="run a single variant instead of experiment.variants")
        if name in ("train", "eval"):
            p.add_argument("--data", help="directory written by gen-data")
        if name == "eval":
            p.add_argument("--checkpoints", help="directory written by train")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (CliConfigError, model_mod.ConfigError, data_mod.DataConfigError, model_mod.CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, data_mod.TaobaoFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
