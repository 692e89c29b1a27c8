"""Command line: gen-data, train, eval, ablate, analyze.

Every command writes ``manifest.json`` into ``--out`` before doing real work.
Settings resolve as flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (embedding_map, evolution_report, separation_stats, split_by_labels,
                       write_embedding_csv, write_evolution_csv)
from .config import ConfigKeyError, from_dict, load_json, to_dict
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .metrics import MetricsReport
from .trainer import (TrainConfig, evaluate, load_checkpoint, load_snapshots, save_checkpoint,
                      save_snapshots, train)

log = logging.getLogger("momentq")

MANIFEST = "manifest.json"
LOG = "log.jsonl"
METRICS = "metrics.json"
ABLATION = "ablation.csv"
EMBEDDING = "embedding.csv"
EVOLUTION = "evolution.csv"
CHECKPOINT = "checkpoint.mqck"
SNAPSHOTS = "snapshots.mqck"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one-line diagnostic instead of usage + message
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config resolution


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve(cls, path: Optional[str], overrides: Dict[str, object]):
    """Default <- config file <- flags. Returns (instance, flags actually applied)."""
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {path}")
        load_json(cls, p)  # strict schema check of the file on its own
        data = json.loads(p.read_text(encoding="utf-8"))
    applied = {k: v for k, v in overrides.items() if v is not None}
    for k, v in applied.items():
        _set_path(data, k, v)
    return from_dict(cls, data, path or cls.__name__), applied


def write_manifest(out: Path, command: str, config_path, resolved, seeds, artifacts,
                   extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": config_path,
        "resolved_config": resolved,
        "seeds": list(seeds),
        "out_dir": str(out),
        "artifacts": {k: str(out / v) for k, v in artifacts.items()},
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _require_dir(path, what="data directory"):
    p = Path(path)
    if not (p / "train.jsonl").is_file():
        raise CliError(f"{what} not found or missing train.jsonl: {path}")
    return p


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    spec, _ = resolve(SyntheticSpec, args.spec, {
        "seed": args.seed, "num_videos": args.num_videos, "num_val": args.num_val,
        "noise_sigma": args.noise_sigma, "foreground_similarity": args.foreground_similarity})
    try:
        spec.validate()
    except ValueError as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    write_manifest(out, "gen-data", args.spec, to_dict(spec), [spec.seed],
                   {"train": "train.jsonl", "val": "val.jsonl", "features": "features"})
    ds = generate_synthetic(spec)
    save_dataset(ds, out)
    print(f"wrote {len(ds.train)} train / {len(ds.val)} val videos to {out}")
    return 0


# ---------------------------------------------------------------- train / eval


def _train_overrides(args) -> Dict[str, object]:
    return {
        "seed": args.seed, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "codebook_init": args.init, "model.placement": args.placement,
        "model.fusion": args.fusion, "model.K": args.K, "model.d": args.d,
    }


def _fit_input_dim(cfg: TrainConfig, ds: Dataset) -> TrainConfig:
    dim = ds.train[0].clip_features.shape[1]
    if cfg.model.input_dim != dim:
        log.info("input_dim set to the dataset's feature dim %d", dim)
        cfg = replace(cfg, model=replace(cfg.model, input_dim=dim))
    return cfg


def cmd_train(args) -> int:
    cfg, applied = resolve(TrainConfig, args.config, _train_overrides(args))
    data = _require_dir(args.data)
    out = Path(args.out)
    artifacts = {"checkpoint": CHECKPOINT, "log": LOG, "metrics": METRICS}
    if cfg.model.quantized:
        artifacts["snapshots"] = SNAPSHOTS
    ds = load_dataset(data)
    if not ds.train:
        raise CliError(f"no training videos in {data}")
    cfg = _fit_input_dim(cfg, ds)
    write_manifest(out, "train", args.config, to_dict(cfg), [cfg.seed], artifacts,
                   {"data_dir": str(data), "flags": applied})
    res = train(cfg, ds.train, ds.val, log_path=out / LOG)
    save_checkpoint(out / CHECKPOINT, res.best)
    if cfg.model.quantized:
        save_snapshots(out / SNAPSHOTS, res.snapshots, cfg.hash())
    if ds.val:
        report = evaluate(res.best.model(cfg), ds.val, cfg).report
        (out / METRICS).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"best epoch {res.best.epoch}: map_avg {report.map_avg:.4f}")
    return 0


def _config_for_checkpoint(ckpt_path: Path, config_path: Optional[str]) -> TrainConfig:
    if config_path:
        return resolve(TrainConfig, config_path, {})[0]
    manifest = ckpt_path.parent / MANIFEST
    if not manifest.is_file():
        raise CliError(f"no --config given and no {MANIFEST} next to {ckpt_path}")
    return from_dict(TrainConfig, json.loads(manifest.read_text())["resolved_config"],
                     str(manifest))


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    cfg = _config_for_checkpoint(ckpt_path, args.config)
    data = _require_dir(args.data)
    out = Path(args.out)
    write_manifest(out, "eval", args.config, to_dict(cfg), [cfg.seed], {"metrics": METRICS},
                   {"checkpoint": str(ckpt_path), "data_dir": str(data), "split": args.split})
    model = load_checkpoint(ckpt_path, cfg).model(cfg)
    samples = getattr(load_dataset(data), args.split)
    report = evaluate(model, samples, cfg).report
    (out / METRICS).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())
    return 0


# ---------------------------------------------------------------- ablate


def _variant(base: TrainConfig, placement=None, fusion=None, init=None, projection=None,
             K=None, frozen=None) -> TrainConfig:
    m = base.model
    m = replace(m, placement=placement or m.placement,
                fusion=fusion if fusion is not None else (None if placement else m.fusion),
                projection=projection or m.projection, K=K or m.K)
    return replace(base, model=m, codebook_init=init or base.codebook_init,
                   codebook_frozen=base.codebook_frozen if frozen is None else frozen)


def ablation_variants(axis: str, base: TrainConfig) -> List[tuple]:
    """(name, config) pairs for one ablation axis, in fixed order."""
    if axis == "components":
        return [("baseline", _variant(base, placement="none")),
                ("+quantization", _variant(base, placement="moment", fusion="soft",
                                           init="random", projection="basic")),
                ("+prior_init", _variant(base, placement="moment", fusion="soft",
                                         init="kmeans", projection="basic")),
                ("+projection", _variant(base, placement="moment", fusion="soft",
                                         init="kmeans", projection="projected"))]
    if axis == "method":
        return [(p, _variant(base, placement=p)) for p in ("image", "clip", "moment")]
    if axis == "fusion":
        return [(f, _variant(base, placement="moment", fusion=f))
                for f in ("hard", "soft", "add", "concat")]
    if axis == "init":
        return [(i, _variant(base, placement="moment", init=i))
                for i in ("random", "selection", "kmeans")]
    if axis == "projection":
        return [("projected", _variant(base, placement="moment", projection="projected")),
                ("basic", _variant(base, placement="moment", projection="basic")),
                ("frozen", _variant(base, placement="moment", frozen=True))]
    if axis == "size":
        return [(str(k), _variant(base, placement="moment", K=k)) for k in (512, 1024, 2048)]
    raise CliError(f"unknown ablation axis {axis!r}")


AXES = ("components", "method", "fusion", "init", "projection", "size")


def _run_cell(job) -> Dict[str, object]:
    name, cfg_dict, seed, data_dir, spec_dict = job
    cfg = from_dict(TrainConfig, cfg_dict)
    cfg = replace(cfg, seed=seed)
    if data_dir:
        ds = load_dataset(data_dir)
    else:
        spec = from_dict(SyntheticSpec, spec_dict)
        ds = generate_synthetic(replace(spec, seed=seed))
    cfg = _fit_input_dim(cfg, ds)
    res = train(cfg, ds.train, ds.val)
    out = evaluate(res.best.model(cfg), ds.val, cfg)
    fg, bg = split_by_labels(out.features, [s.saliency_labels for s in ds.val])
    row = {"variant": name, "seed": seed}
    row.update(out.report.to_dict())
    row["silhouette"] = separation_stats(fg, bg)["silhouette"]
    return row


def ablation_columns() -> List[str]:
    return ["variant", "seed"] + MetricsReport.columns() + ["silhouette"]


def summarize(rows: Sequence[dict], variants: Sequence[str]) -> List[dict]:
    out = []
    metrics = ablation_columns()[2:]
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        row = {"variant": v, "seed": "mean±std"}
        for m in metrics:
            vals = np.array([float(r[m]) for r in sel])
            row[m] = f"{vals.mean():.4f}±{vals.std():.4f}"
        out.append(row)
    return out


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("MQVTG_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise CliError(f"MQVTG_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_jobs))


def cmd_ablate(args) -> int:
    base, applied = resolve(TrainConfig, args.config, _train_overrides(args))
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    spec = None
    if args.data:
        _require_dir(args.data)
    else:
        spec, _ = resolve(SyntheticSpec, args.spec, {})
    variants = ablation_variants(args.axis, base)
    seeds = [base.seed + i for i in range(args.seeds)]
    out = Path(args.out)
    write_manifest(out, "ablate", args.config, to_dict(base), seeds, {"ablation": ABLATION},
                   {"axis": args.axis, "variants": {n: to_dict(c) for n, c in variants},
                    "data_dir": args.data, "synthetic_spec": to_dict(spec) if spec else None,
                    "flags": applied})
    jobs = [(n, to_dict(c), s, args.data, to_dict(spec) if spec else None)
            for n, c in variants for s in seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        rows = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))  # map keeps job order
    rows = rows + summarize(rows, [n for n, _ in variants])
    with open(out / ABLATION, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ablation_columns(), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out / ABLATION} ({len(jobs)} runs)")
    return 0


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    run = Path(args.run)
    ckpt_path = run / CHECKPOINT
    if not ckpt_path.is_file():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    cfg = _config_for_checkpoint(ckpt_path, args.config)
    data = _require_dir(args.data)
    out = Path(args.out)
    artifacts = {"embedding": EMBEDDING}
    snap_path = run / SNAPSHOTS
    if snap_path.is_file():
        artifacts["evolution"] = EVOLUTION
    write_manifest(out, "analyze", args.config, to_dict(cfg), [cfg.seed], artifacts,
                   {"run_dir": str(run), "data_dir": str(data), "video": args.video})
    model = load_checkpoint(ckpt_path, cfg).model(cfg)
    val = load_dataset(data).val
    if args.video:
        val = [s for s in val if s.vid == args.video]
        if not val:
            raise CliError(f"video {args.video!r} not in the validation split")
    res = evaluate(model, val, cfg)
    fg, bg = split_by_labels(res.features, [s.saliency_labels for s in val])
    codewords = None
    if model.config.quantized and res.histogram is not None:
        codewords = model.codebook.project().values[np.flatnonzero(res.histogram)]
    write_embedding_csv(out / EMBEDDING, embedding_map(fg, bg, codewords))
    if snap_path.is_file():
        write_evolution_csv(out / EVOLUTION, evolution_report(load_snapshots(snap_path)))
    if len(fg) >= 2 and len(bg) >= 2:
        print(json.dumps(separation_stats(fg, bg)))
    return 0


# ---------------------------------------------------------------- entry point


def _add_train_flags(p):
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--init", choices=("random", "selection", "kmeans"))
    p.add_argument("--placement", choices=("none", "image", "clip", "moment"))
    p.add_argument("--fusion", choices=("hard", "soft", "add", "concat"))
    p.add_argument("--K", type=int)
    p.add_argument("--d", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="momentq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="SyntheticSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-videos", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--foreground-similarity", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="TrainConfig JSON (default: manifest next to checkpoint)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation axis over seeds")
    _add_train_flags(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--data", help="dataset directory (default: synthetic data per seed)")
    p.add_argument("--spec", help="SyntheticSpec JSON used when --data is absent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="export latent map and codebook evolution CSVs")
    p.add_argument("--run", required=True, help="train output directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--video", help="restrict the latent map to one validation video id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigKeyError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"momentq {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
