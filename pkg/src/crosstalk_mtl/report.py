"""Tables and figures from sweep results.

Every figure is backed by a delimited-text table written next to it, so the
plots can be regenerated with any tool.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import RankRow, RunReport
from .models import KINDS

MOTOR_PARTS = ("irf", "orf", "misalignment", "unbalance")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _arch_order(names) -> list[str]:
    known = [k for k in KINDS if k in names]
    return known + sorted(n for n in names if n not in KINDS)


def score_rows(report: RunReport) -> list[tuple]:
    rows = []
    for arch in _arch_order(report.scores):
        for seed in sorted(report.scores[arch]):
            for metric, v in report.scores[arch][seed].items():
                rows.append((arch, seed, metric, f"{v:.6f}"))
    return rows


def mean_rows(report: RunReport) -> list[tuple]:
    rows = []
    for metric in report.metrics():
        means = report.means(metric)
        for arch in _arch_order(means):
            if np.isnan(means[arch]):
                continue
            vals = [report.scores[arch][s][metric] for s in report.seeds]
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            rows.append((arch, metric, f"{means[arch]:.6f}", f"{sd:.6f}", len(vals)))
    return rows


def rank_rows(ranks: Sequence[RankRow]) -> list[tuple]:
    return [(r.rank, r.architecture, f"{r.score:.6f}") for r in ranks]


def write_tables(report: RunReport, out_dir, name: str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "scores": out / f"{name}_scores.csv",
        "means": out / f"{name}_means.csv",
        "text": out / f"{name}_report.txt",
    }
    _write_csv(paths["scores"], ["architecture", "seed", "metric", "value"], score_rows(report))
    _write_csv(paths["means"], ["architecture", "metric", "mean", "std", "n_seeds"], mean_rows(report))
    if len(report.scores) >= 2:
        paths["ranks"] = out / f"{name}_ranks.csv"
        _write_csv(paths["ranks"], ["rank", "architecture", "mean_macro_f1"], rank_rows(report.ranks()))
    paths["text"].write_text(report.to_text())
    return paths


def rank_matrix(reports: Mapping[str, RunReport]) -> tuple[list[str], list[str], np.ndarray]:
    """Ranks of every architecture (rows) in every setting (columns); 0 where absent."""
    settings = list(reports)
    archs = _arch_order({a for r in reports.values() for a in r.scores})
    mat = np.zeros((len(archs), len(settings)), dtype=int)
    for j, s in enumerate(settings):
        for row in reports[s].ranks():
            mat[archs.index(row.architecture), j] = row.rank
    return archs, settings, mat


def write_rank_summary(reports: Mapping[str, RunReport], out_dir) -> Path:
    archs, settings, mat = rank_matrix(reports)
    path = Path(out_dir) / "rank_summary.csv"
    _write_csv(path, ["architecture"] + settings, [[a] + list(map(int, mat[i])) for i, a in enumerate(archs)])
    return path


# ---------------------------------------------------------------- figures

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_headline(reports: Mapping[str, RunReport], path) -> Path:
    """Mean headline macro F1 per architecture, one panel per setting; dots are seeds."""
    plt = _pyplot()
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.4), squeeze=False)
    for ax, (setting, rep) in zip(axes[0], reports.items()):
        archs = _arch_order(rep.scores)
        means = [rep.mean(a) for a in archs]
        x = np.arange(len(archs))
        colors = ["tab:red" if a == "rndr" else "tab:gray" if a == "stl" else "tab:blue" for a in archs]
        ax.bar(x, means, color=colors, alpha=0.8)
        for i, a in enumerate(archs):
            seeds = [rep.scores[a][s][rep.headline] for s in sorted(rep.scores[a])]
            ax.scatter(np.full(len(seeds), i), seeds, s=10, color="black", zorder=3)
        ax.set_xticks(x, [a.upper() for a in archs], rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.set_title(setting)
        ax.set_ylabel("macro F1")
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_components(rep: RunReport, path, title: str = "") -> Path:
    """Per-component macro F1 of the motor benchmark, grouped by architecture."""
    plt = _pyplot()
    archs = _arch_order(rep.scores)
    x = np.arange(len(archs))
    width = 0.8 / len(MOTOR_PARTS)
    fig, ax = plt.subplots(figsize=(7.5, 3.4))
    for k, part in enumerate(MOTOR_PARTS):
        means = [rep.mean(a, f"f1.{part}") for a in archs]
        ax.bar(x + (k - 1.5) * width, means, width, label=part)
    ax.set_xticks(x, [a.upper() for a in archs])
    ax.set_ylim(0, 1)
    ax.set_ylabel("macro F1")
    ax.legend(ncol=4, fontsize=8, loc="lower right")
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(reports: Mapping[str, RunReport], out_dir, figures: bool = True) -> list[Path]:
    """All tables for every setting, the cross-setting rank summary and the figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, rep in reports.items():
        written.extend(write_tables(rep, out, name).values())
    if all(len(r.scores) >= 2 for r in reports.values()):
        written.append(write_rank_summary(reports, out))
    if figures:
        written.append(plot_headline(reports, out / "headline_macro_f1.png"))
        for name, rep in reports.items():
            if "f1.irf" in rep.metrics():
                written.append(plot_components(rep, out / f"{name}_components.png", name))
    return written
