"""Command-line driver: run, sweep-coreset, report, gen-data, select.

Exit codes: 0 on success, 2 for configuration errors (with a message naming
the offending field), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, cil_config_for, load_config, runconfig_to_dict, stream_for
from .continual import run_cil
from .coreset import SelectionConfig, select_coreset_blo, select_influence, select_random
from .datasets import gen_blobs, load_dataset, save_dataset
from .models import save_model
from .reporting import (
    final_mean_ra,
    metrics_rows,
    read_metrics_csv,
    render_report,
    write_metrics_csv,
    write_sweep_csv,
    write_sweep_summary,
)


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(flag, f"expected a comma-separated integer list, got {text!r}")


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = override or cfg.out_dir
    if not out:
        raise ConfigError("out_dir", "set it in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(config_path: str, out: str | None = None, seeds: str | None = None) -> int:
    cfg = load_config(config_path)
    if seeds:
        cfg = replace(cfg, seeds=tuple(_parse_int_list(seeds, "--seeds")))
    out_path = _out_dir(cfg, out)
    (out_path / "config.json").write_text(
        json.dumps(runconfig_to_dict(cfg), indent=2), encoding="utf-8"
    )
    rows = []
    for seed in cfg.seeds:
        stream = stream_for(cfg, seed)
        result = run_cil(stream, cil_config_for(cfg, seed))
        rows.extend(metrics_rows(cfg.coreset_method, result.matrix))
        seed_dir = out_path / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        for t, model in enumerate(result.models, start=1):
            save_model(model, seed_dir / f"model_t{t}.json")
        (seed_dir / "bank.json").write_text(
            json.dumps(result.bank.to_dict(), indent=2), encoding="utf-8"
        )
    write_metrics_csv(out_path / "metrics.csv", rows)
    return 0


def cmd_sweep_coreset(
    config_path: str,
    sizes: list[int],
    out: str | None = None,
    seeds: str | None = None,
) -> int:
    cfg = load_config(config_path)
    if seeds:
        cfg = replace(cfg, seeds=tuple(_parse_int_list(seeds, "--seeds")))
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError("--sizes", f"sizes must be positive integers, got {sizes}")
    out_path = _out_dir(cfg, out)
    (out_path / "config.json").write_text(
        json.dumps(runconfig_to_dict(cfg), indent=2), encoding="utf-8"
    )
    sweep_rows = []
    for size in sizes:
        for method in cfg.sweep_methods:
            for seed in cfg.seeds:
                stream = stream_for(cfg, seed)
                result = run_cil(
                    stream, cil_config_for(cfg, seed, method=method, capacity=size)
                )
                sweep_rows.append([size, method, seed, repr(final_mean_ra(result.matrix))])
    write_sweep_csv(out_path / "sweep.csv", sweep_rows)
    write_sweep_summary(out_path / "summary.csv", sweep_rows)
    return 0


def cmd_report(run_dir: str) -> int:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise ConfigError("--out", f"no metrics.csv under {run_dir}")
    try:
        rows = read_metrics_csv(path)
    except ValueError as exc:
        raise ConfigError("metrics.csv", str(exc)) from exc
    sys.stdout.write(render_report(rows))
    return 0


def cmd_gen_data(config_path: str, out: str | None = None) -> int:
    cfg = load_config(config_path)
    out_path = _out_dir(cfg, out)
    ds = gen_blobs(
        num_classes=cfg.data.num_classes,
        dim=cfg.data.dim,
        per_class=cfg.data.per_class,
        spread=cfg.data.spread,
        seed=cfg.data.seed,
        center_scale=cfg.data.center_scale,
    )
    save_dataset(ds, out_path / "dataset.json")
    return 0


def cmd_select(
    data_path: str,
    method: str,
    n: int,
    seed: int,
    out: str | None = None,
    config_path: str | None = None,
) -> int:
    ds = load_dataset(data_path)
    if config_path:
        run_cfg = load_config(config_path)
        sel = replace(run_cfg.selection, n=n, seed=seed)
    else:
        sel = SelectionConfig(n=n, seed=seed)
    if method == "blo":
        result = select_coreset_blo(ds, sel)
        doc = {
            "method": method,
            "n": n,
            "seed": seed,
            "indices": [int(i) for i in result.indices],
            "final_weights": result.weights.tolist(),
            "upper_loss_trace": result.upper_loss_trace,
        }
    elif method == "random":
        idx = select_random(ds, n, seed)
        doc = {
            "method": method,
            "n": n,
            "seed": seed,
            "indices": [int(i) for i in idx],
            "upper_loss_trace": [],
        }
    elif method == "influence":
        idx = select_influence(ds, n, sel)
        doc = {
            "method": method,
            "n": n,
            "seed": seed,
            "indices": [int(i) for i in idx],
            "upper_loss_trace": [],
        }
    else:
        raise ConfigError("--method", f"unknown selection method {method!r}")
    out_file = Path(out) if out else Path("selection.json")
    if out_file.is_dir():
        out_file = out_file / "selection.json"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(json.dumps(doc), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustcl",
        description="Robustness-preserving class-incremental learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the incremental protocol per seed")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seeds", default=None, help='e.g. "1,2,3"')

    p_sweep = sub.add_parser("sweep-coreset", help="sweep per-class coreset sizes")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--sizes", required=True, help='e.g. "5,25,50"')
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--seeds", default=None)

    p_report = sub.add_parser("report", help="render a markdown table from metrics.csv")
    p_report.add_argument("--out", required=True, help="run directory with metrics.csv")

    p_gen = sub.add_parser("gen-data", help="generate and serialize the dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None)

    p_sel = sub.add_parser("select", help="standalone coreset selection on a dataset file")
    p_sel.add_argument("--data", required=True)
    p_sel.add_argument("--method", required=True, choices=["blo", "random", "influence"])
    p_sel.add_argument("--n", required=True, type=int)
    p_sel.add_argument("--seed", default=0, type=int)
    p_sel.add_argument("--out", default=None)
    p_sel.add_argument("--config", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seeds)
        if args.command == "sweep-coreset":
            sizes = _parse_int_list(args.sizes, "--sizes")
            return cmd_sweep_coreset(args.config, sizes, args.out, args.seeds)
        if args.command == "report":
            return cmd_report(args.out)
        if args.command == "gen-data":
            return cmd_gen_data(args.config, args.out)
        if args.command == "select":
            return cmd_select(args.data, args.method, args.n, args.seed, args.out, args.config)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
