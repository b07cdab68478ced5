"""Command-line entry point.

Verbs: search | retrain | trace-export | compare. Every run writes a
self-describing directory (manifest + trace + genotype) sufficient to
reproduce it. Exit codes: 0 success, 1 user error, 2 internal abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, data
from .errors import SparseNasError, SearchAbort, ValidationError
from .search import (Algorithm, EarlyStopConfig, SearchConfig, SearchTrace,
                     retrain, search)
from .simplex import AnnealSchedule
from .supernet import Genotype, OP_NAMES, OpKind, NUM_EDGES, SupernetConfig


class UserError(Exception):
    """Invalid invocation or configuration; maps to exit code 1."""


ALGORITHM_NAMES = [a.value for a in Algorithm]

_NESTED = {
    "schedule": AnnealSchedule,
    "early_stop": EarlyStopConfig,
    "supernet": SupernetConfig,
}

_DATA_DEFAULTS = {"synth": True, "n": 2000, "classes": 4, "image_size": 16,
                  "seed": 0, "noise": 0.1}
_RETRAIN_DEFAULTS = {"epochs": 15, "batch_size": 64, "lr": 0.05, "seed": 0}


def _build_dataclass(cls, d: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in names:
            raise UserError(f"unknown config key '{path}{key}'")
        if key in _NESTED and isinstance(value, dict):
            value = _build_dataclass(_NESTED[key], value, f"{path}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except SparseNasError as exc:
        raise UserError(f"bad value under '{path.rstrip('.')}': {exc}") from exc


def load_config(path) -> dict:
    """Parse a TOML config file into {search, data, retrain} sections."""
    try:
        raw = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UserError(f"cannot read config {path}: {exc}") from exc
    for section in raw:
        if section not in ("search", "data", "retrain"):
            raise UserError(f"unknown config section '{section}'")
    return raw


def make_search_config(raw: dict, algorithm=None, seed=None) -> SearchConfig:
    section = dict(raw.get("search", {}))
    if algorithm is not None:
        section["algorithm"] = algorithm
    if seed is not None:
        section["seed"] = seed
    if "algorithm" in section and section["algorithm"] not in ALGORITHM_NAMES:
        raise UserError(
            f"unknown algorithm '{section['algorithm']}'; choose one of: "
            + ", ".join(ALGORITHM_NAMES))
    return _build_dataclass(SearchConfig, section, "search.")


def get_dataset(dataset_dir, raw_config: dict) -> data.Dataset:
    if dataset_dir is not None:
        if not Path(dataset_dir).exists():
            raise UserError(f"dataset directory not found: {dataset_dir}")
        return data.load(dataset_dir)
    params = dict(_DATA_DEFAULTS)
    for key, value in raw_config.get("data", {}).items():
        if key not in _DATA_DEFAULTS:
            raise UserError(f"unknown config key 'data.{key}'")
        params[key] = value
    params.pop("synth")
    return data.synth_blobs(n=params["n"], classes=params["classes"],
                            image_size=params["image_size"],
                            seed=params["seed"], noise=params["noise"])


def _dataset_hash(dataset: data.Dataset) -> str:
    h = hashlib.sha256()
    h.update(dataset.name.encode())
    h.update(dataset.labels.tobytes())
    return h.hexdigest()[:16]


def _config_snapshot(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _config_snapshot(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if hasattr(obj, "value"):
        return obj.value
    return obj


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_search(config: SearchConfig, dataset: data.Dataset, out_dir) -> dict:
    """Execute one search run and persist manifest/trace/genotype."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "config": _config_snapshot(config),
        "dataset": {"name": dataset.name, "hash": _dataset_hash(dataset)},
        "code_version": __version__,
        "seed": config.seed,
        "started_at": _now(),
        "outputs": {"trace": "trace.jsonl", "genotype": "genotype.txt"},
    }
    try:
        genotype, trace = search(config, dataset)
    except SearchAbort as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            partial.to_jsonl(out / "trace.jsonl")
        manifest.update(ended_at=_now(), aborted=str(exc))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        raise
    trace.to_jsonl(out / "trace.jsonl")
    (out / "genotype.txt").write_text(genotype.to_string() + "\n")
    (out / "genotype.json").write_text(json.dumps(genotype.to_json(), indent=2))
    manifest.update(
        ended_at=_now(),
        stop_reason=trace.stop_reason,
        stopped_epoch=trace.records[-1].epoch if trace.records else None,
        search_seconds=trace.total_seconds(),
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return {"genotype": genotype, "trace": trace, "manifest": manifest}


def cmd_search(args) -> int:
    raw = load_config(args.config) if args.config else {}
    config = make_search_config(raw, algorithm=args.algorithm, seed=args.seed)
    dataset = get_dataset(args.dataset, raw)
    run_search(config, dataset, args.out)
    return 0


def cmd_retrain(args) -> int:
    raw = load_config(args.config) if args.config else {}
    params = dict(_RETRAIN_DEFAULTS)
    for key, value in raw.get("retrain", {}).items():
        if key not in _RETRAIN_DEFAULTS:
            raise UserError(f"unknown config key 'retrain.{key}'")
        params[key] = value
    if args.epochs is not None:
        params["epochs"] = args.epochs
    geno_path = Path(args.genotype)
    if not geno_path.exists():
        raise UserError(f"genotype file not found: {args.genotype}")
    try:
        genotype = Genotype.from_string(geno_path.read_text())
    except ValidationError as exc:
        raise UserError(f"invalid genotype: {exc}") from exc
    dataset = get_dataset(args.dataset, raw)
    seeds = args.seeds or [params["seed"]]
    sup_cfg = make_search_config(raw).supernet
    accs = {}
    for seed in seeds:
        accs[seed] = retrain(genotype, dataset, params["epochs"], seed=seed,
                             batch_size=params["batch_size"], lr=params["lr"],
                             supernet_config=sup_cfg)
    values = list(accs.values())
    report = {
        "schema_version": 1,
        "genotype": genotype.to_string(),
        "dataset": dataset.name,
        "epochs": params["epochs"],
        "seeds": list(seeds),
        "accuracies": {str(s): a for s, a in accs.items()},
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def trace_to_csv(trace: SearchTrace, edge: int) -> str:
    """Per-epoch probabilities and ranks of one edge, CSV-formatted."""
    if not 0 <= edge < NUM_EDGES:
        raise UserError(f"edge index {edge} outside [0, {NUM_EDGES})")
    names = [OP_NAMES[k] for k in OpKind]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "temperature"]
                    + [f"p_{n}" for n in names] + [f"rank_{n}" for n in names])
    for rec in trace.records:
        p = np.asarray(rec.probs[edge])
        order = np.argsort(-p, kind="stable")
        ranks = np.empty_like(order)
        ranks[order] = np.arange(p.size)
        writer.writerow([rec.epoch, rec.temperature]
                        + [repr(float(v)) for v in p]
                        + [int(r) for r in ranks])
    return buf.getvalue()


def cmd_trace_export(args) -> int:
    path = Path(args.trace)
    if not path.exists():
        raise UserError(f"trace file not found: {args.trace}")
    if args.format != "csv":
        raise UserError(f"unsupported format '{args.format}'")
    try:
        trace = SearchTrace.from_jsonl(path)
    except (ValidationError, json.JSONDecodeError, TypeError) as exc:
        raise UserError(f"cannot parse trace: {exc}") from exc
    text = trace_to_csv(trace, args.edge)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _compare_one(raw, algorithm, seed, dataset, run_dir, retrain_params, sup_cfg):
    config = make_search_config(raw, algorithm=algorithm, seed=seed)
    result = run_search(config, dataset, run_dir)
    acc = retrain(result["genotype"], dataset, retrain_params["epochs"],
                  seed=seed, batch_size=retrain_params["batch_size"],
                  lr=retrain_params["lr"], supernet_config=sup_cfg)
    return {"algorithm": algorithm, "seed": seed, "accuracy": acc,
            "search_seconds": result["trace"].total_seconds(),
            "stop_reason": result["trace"].stop_reason}


def cmd_compare(args) -> int:
    raw = load_config(args.config) if args.config else {}
    algorithms = args.algorithms
    if not algorithms:
        raise UserError("need at least one algorithm")
    for name in algorithms:
        if name not in ALGORITHM_NAMES:
            raise UserError(f"unknown algorithm '{name}'; choose one of: "
                            + ", ".join(ALGORITHM_NAMES))
    seeds = args.seeds or [0]
    dataset = get_dataset(args.dataset, raw)
    retrain_params = dict(_RETRAIN_DEFAULTS)
    for key, value in raw.get("retrain", {}).items():
        if key not in _RETRAIN_DEFAULTS:
            raise UserError(f"unknown config key 'retrain.{key}'")
        retrain_params[key] = value
    sup_cfg = make_search_config(raw).supernet
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(alg, seed) for alg in algorithms for seed in seeds]
    threads = int(os.environ.get("SEARCH_THREADS", "1"))
    results = []
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_compare_one, raw, alg, seed, dataset,
                                   out / f"{alg}-seed{seed}", retrain_params, sup_cfg)
                       for alg, seed in jobs]
            for fut in futures:
                results.append(fut.result())
                _write_compare_tables(out, algorithms, results)  # partial persist
    else:
        for alg, seed in jobs:
            results.append(_compare_one(raw, alg, seed, dataset,
                                        out / f"{alg}-seed{seed}",
                                        retrain_params, sup_cfg))
            _write_compare_tables(out, algorithms, results)
    print((out / "table.md").read_text())
    return 0


def _write_compare_tables(out: Path, algorithms, results) -> None:
    rows = []
    for alg in algorithms:
        runs = [r for r in results if r["algorithm"] == alg]
        if not runs:
            continue
        accs = [r["accuracy"] for r in runs]
        times = [r["search_seconds"] for r in runs]
        rows.append({
            "algorithm": alg,
            "acc_mean": float(np.mean(accs)),
            "acc_std": float(np.std(accs)),
            "time_mean_s": float(np.mean(times)),
            "runs": len(runs),
        })
    table = {"schema_version": 1, "rows": rows, "runs": results}
    (out / "table.json").write_text(json.dumps(table, indent=2))
    lines = ["| algorithm | acc_mean | acc_std | time_mean_s |",
             "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['algorithm']} | {r['acc_mean']:.4f} "
                     f"| {r['acc_std']:.4f} | {r['time_mean_s']:.1f} |")
    (out / "table.md").write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsenas",
        description="Architecture search with sparse operation mixing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run one architecture search")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dataset", help="dataset directory (default: synthetic)")
    p.add_argument("--algorithm", help="|".join(ALGORITHM_NAMES))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", help="retrain a discrete genotype from scratch")
    p.add_argument("--genotype", required=True, help="genotype string file")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dataset", help="dataset directory (default: synthetic)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("trace-export", help="export one edge of a trace as CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--edge", type=int, required=True)
    p.add_argument("--format", default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace_export)

    p = sub.add_parser("compare", help="run several algorithms and tabulate")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dataset", help="dataset directory (default: synthetic)")
    p.add_argument("--algorithms", nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", required=True, help="comparison output directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SparseNasError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
