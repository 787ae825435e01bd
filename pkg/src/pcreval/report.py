"""Rendering of evaluation results: console grids, CSV files, and figures.

The report path writes three kinds of artifacts next to each other: a
fixed-width method-comparison grid on stdout, delimited (CSV) files with the
same numbers, and matplotlib figures (score-vs-mAP scatter, severity-vs-RMSE)
rendered to PNG files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .detection import atomic_write_text
from .regression import EvalReport, MetaSample, statistics


def render_method_grid(reports: Mapping[str, EvalReport]) -> str:
    """Fixed-width grid: one row per method, columns per held-out source,
    then average RMSE and average rank. Errors are in mAP percentage points."""
    if not reports:
        return "(no methods)"
    first = next(iter(reports.values()))
    sources = [e.dataset_id for e in first.per_dataset]
    name_w = max(12, max(len(m) for m in reports) + 2)
    col_w = max(12, max(len(s) for s in sources) + 2)
    header = f"{'Method':<{name_w}}" + "".join(f"{s:>{col_w}}" for s in sources)
    header += f"{'Avg RMSE':>12}{'Avg Rank':>10}"
    lines = [header, "-" * len(header)]
    for method, rep in reports.items():
        row = f"{method:<{name_w}}"
        row += "".join(f"{100 * e.abs_error:>{col_w}.2f}" for e in rep.per_dataset)
        row += f"{100 * rep.rmse:>12.2f}"
        row += f"{rep.avg_rank:>10.2f}" if rep.avg_rank is not None else f"{'-':>10}"
        lines.append(row)
    return "\n".join(lines)


def render_severity_grid(per_severity: Mapping[int, Mapping[str, float]]) -> str:
    if not per_severity:
        return "(no severity breakdown)"
    severities = sorted(per_severity)
    methods = list(next(iter(per_severity.values())))
    name_w = max(12, max(len(m) for m in methods) + 2)
    header = f"{'Method':<{name_w}}" + "".join(f"{'sev ' + str(s):>10}" for s in severities)
    lines = [header, "-" * len(header)]
    for method in methods:
        row = f"{method:<{name_w}}"
        row += "".join(f"{100 * per_severity[s][method]:>10.2f}" for s in severities)
        lines.append(row)
    return "\n".join(lines)


def _csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def write_per_source_csv(reports: Mapping[str, EvalReport], path) -> None:
    rows: list[Sequence] = [
        ("method", "dataset_id", "estimate", "estimate_clamped", "true_map", "abs_error")
    ]
    for method, rep in reports.items():
        for e in rep.per_dataset:
            rows.append((method, e.dataset_id, f"{e.estimate:.6f}",
                         f"{e.estimate_clamped:.6f}", f"{e.true_map:.6f}",
                         f"{e.abs_error:.6f}"))
    atomic_write_text(path, _csv_text(rows))


def write_methods_csv(reports: Mapping[str, EvalReport],
                      per_severity: Mapping[int, Mapping[str, float]] | None, path) -> None:
    severities = sorted(per_severity) if per_severity else []
    header = ["method", "rmse", "pearson", "spearman", "avg_rank"]
    header += [f"rmse_severity_{s}" for s in severities]
    rows: list[Sequence] = [header]
    for method, rep in reports.items():
        row = [
            method,
            f"{rep.rmse:.6f}",
            "" if rep.pearson is None else f"{rep.pearson:.6f}",
            "" if rep.spearman is None else f"{rep.spearman:.6f}",
            "" if rep.avg_rank is None else f"{rep.avg_rank:.4f}",
        ]
        row += [f"{per_severity[s][method]:.6f}" for s in severities]
        rows.append(row)
    atomic_write_text(path, _csv_text(rows))


def score_correlations(samples: Sequence[MetaSample],
                       features: Sequence[str]) -> dict[str, dict[str, float | None]]:
    """Pearson/Spearman of each dataset-level score against true mAP over the
    transformed datasets (the regression's training view of the world)."""
    train = [s for s in samples if not s.is_test]
    out: dict[str, dict[str, float | None]] = {}
    for feature in features:
        xs = [s.summary.feature(feature) for s in train]
        ys = [s.true_map() for s in train]
        _, pearson, spearman = statistics(xs, ys)
        out[feature] = {"pearson": pearson, "spearman": spearman}
    return out


def write_report_json(reports: Mapping[str, EvalReport],
                      per_severity: Mapping[int, Mapping[str, float]] | None,
                      correlations: Mapping[str, Mapping[str, float | None]] | None,
                      path) -> None:
    doc: dict = {"methods": [rep.to_json() for rep in reports.values()]}
    if per_severity:
        doc["per_severity_rmse"] = {
            str(sev): dict(by_method) for sev, by_method in sorted(per_severity.items())
        }
    if correlations:
        doc["score_correlations"] = {k: dict(v) for k, v in correlations.items()}
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def plot_score_vs_map(samples: Sequence[MetaSample], features: Sequence[str], path) -> None:
    """Scatter each dataset-level score against true mAP, one panel per score,
    with a least-squares trend line and the correlation in the title."""
    train = [s for s in samples if not s.is_test]
    tests = [s for s in samples if s.is_test]
    n = len(features)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.6), squeeze=False)
    for ax, feature in zip(axes[0], features):
        xs = [s.summary.feature(feature) for s in train]
        ys = [100 * s.true_map() for s in train]
        ax.scatter(xs, ys, s=14, alpha=0.6, label="meta-dataset")
        if tests:
            ax.scatter(
                [s.summary.feature(feature) for s in tests],
                [100 * s.true_map() for s in tests],
                marker="*", s=120, color="tab:red", label="test sets",
            )
        _, pearson, spearman = statistics(xs, ys)
        if pearson is not None and len(set(xs)) > 1:
            slope, intercept = _fit_line(xs, ys)
            lo, hi = min(xs), max(xs)
            ax.plot([lo, hi], [slope * lo + intercept, slope * hi + intercept],
                    color="black", linewidth=1)
            ax.set_title(f"{feature}  (r={pearson:.2f}, ρ={spearman:.2f})")
        else:
            ax.set_title(feature)
        ax.set_xlabel(feature)
        ax.set_ylabel("true mAP (%)")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def plot_severity_rmse(per_severity: Mapping[int, Mapping[str, float]], path) -> None:
    severities = sorted(per_severity)
    methods = list(next(iter(per_severity.values())))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method in methods:
        ax.plot(severities, [100 * per_severity[s][method] for s in severities],
                marker="o", label=method)
    ax.set_xlabel("corruption severity")
    ax.set_ylabel("RMSE (mAP %)")
    ax.set_xticks(list(severities))
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def _fit_line(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx if sxx else 0.0
    return slope, my - slope * mx


def _save_atomic(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        fig.savefig(tmp, format=path.suffix.lstrip(".") or "png", dpi=120)
        tmp.replace(path)
    finally:
        plt.close(fig)
        if tmp.exists():
            tmp.unlink()
