"""Metrics CSV emission and the markdown accuracy/robustness report.

The metrics schema is fixed: ``method,seed,time_step,eval_task,sa,ra`` with
one row per populated matrix cell. Floats are written with ``repr`` so a
re-run with the same config produces byte-identical files.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import numpy as np

from .continual import MetricsMatrix

METRICS_HEADER = ["method", "seed", "time_step", "eval_task", "sa", "ra"]
SWEEP_HEADER = ["size", "method", "seed", "final_mean_ra"]
SUMMARY_HEADER = ["size", "method", "mean_ra", "std_ra"]


def metrics_rows(method: str, matrix: MetricsMatrix) -> list[list]:
    return [
        [method, matrix.seed, t, j, repr(sa), repr(ra)]
        for t, j, sa, ra in matrix.rows()
    ]


def write_metrics_csv(path, rows: list[list]) -> None:
    rows = sorted(rows, key=lambda r: (r[0], int(r[1]), int(r[2]), int(r[3])))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def read_metrics_csv(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != METRICS_HEADER:
        raise ValueError(
            f"metrics file {path} has header {reader.fieldnames}, "
            f"expected {METRICS_HEADER}"
        )
    rows = []
    for raw in reader:
        rows.append(
            {
                "method": raw["method"],
                "seed": int(raw["seed"]),
                "time_step": int(raw["time_step"]),
                "eval_task": int(raw["eval_task"]),
                "sa": float(raw["sa"]),
                "ra": float(raw["ra"]),
            }
        )
    if not rows:
        raise ValueError(f"metrics file {path} contains no data rows")
    return rows


def final_mean_ra(matrix: MetricsMatrix) -> float:
    """Mean robust accuracy over all tasks at the last time step."""
    T = matrix.num_tasks
    return float(np.mean([matrix.cells[(T, j)][1] for j in range(1, T + 1)]))


def write_sweep_csv(path, rows: list[list]) -> None:
    rows = sorted(rows, key=lambda r: (int(r[0]), r[1], int(r[2])))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)


def write_sweep_summary(path, rows: list[list]) -> None:
    """Mean and standard deviation of final RA per (size, method)."""
    groups: dict[tuple[int, str], list[float]] = defaultdict(list)
    for size, method, _seed, ra in rows:
        groups[(int(size), method)].append(float(ra))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for (size, method), values in sorted(groups.items()):
            writer.writerow(
                [size, method, repr(float(np.mean(values))), repr(float(np.std(values)))]
            )


def _fmt_cell(sa: float, ra: float) -> str:
    return f"{100 * sa:.2f} / {100 * ra:.2f}"


def render_report(rows: list[dict]) -> str:
    """Markdown table in the time-step x task layout, averaged over seeds.

    Row groups run from t=2 to the final step; columns are the tasks seen so
    far with "SA / RA" percentage cells. With several methods present, the
    best value per cell is bolded.
    """
    if not rows:
        raise ValueError("no metric rows to report")
    T = max(r["time_step"] for r in rows)
    methods = sorted({r["method"] for r in rows})
    # mean over seeds per (method, t, j)
    acc: dict[tuple, list] = defaultdict(list)
    for r in rows:
        acc[(r["method"], r["time_step"], r["eval_task"])].append((r["sa"], r["ra"]))
    mean = {
        k: (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
        for k, vals in acc.items()
    }

    lines = []
    header = ["Tasks", "Method"] + [f"T{j} (SA / RA %)" for j in range(1, T + 1)]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for t in range(2, T + 1):
        for method in methods:
            cells = [f"T1~T{t}" if method == methods[0] else "", method]
            for j in range(1, T + 1):
                key = (method, t, j)
                if key not in mean:
                    cells.append("-")
                    continue
                sa, ra = mean[key]
                best_sa = max(mean[(m, t, j)][0] for m in methods if (m, t, j) in mean)
                best_ra = max(mean[(m, t, j)][1] for m in methods if (m, t, j) in mean)
                text = _fmt_cell(sa, ra)
                if len(methods) > 1 and sa == best_sa and ra == best_ra:
                    text = f"**{text}**"
                cells.append(text)
            lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
