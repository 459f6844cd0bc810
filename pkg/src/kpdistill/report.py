"""Metric tables and figures from evaluation CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import Aggregate, f1  # noqa: E402

PNG_META = {"Software": None}


class ReportError(Exception):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


def _fmt(x: float, digits: int = 6) -> str:
    return f"{x:.{digits}f}"


def write_aggregate_csv(rows: Sequence[Aggregate], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "n_pairs", "precision", "repeatability", "f1", "arithmetic_mean", "degenerate_pairs"])
        for a in rows:
            w.writerow([a.model, a.n_pairs, _fmt(a.precision), _fmt(a.repeatability), _fmt(a.f1), _fmt(a.arithmetic_mean), a.degenerate_pairs])


def read_metric_rows(path) -> list[dict]:
    """Rows with ``model``, ``precision`` and ``repeatability`` (``recall`` is accepted too)."""
    path = Path(path)
    if not path.exists():
        raise ReportError(path, "file not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "precision" not in cols:
            raise ReportError(path, "missing column 'precision'")
        rec_col = "repeatability" if "repeatability" in cols else "recall" if "recall" in cols else None
        if rec_col is None:
            raise ReportError(path, "missing column 'repeatability' (or 'recall')")
        rows = []
        for k, row in enumerate(reader, start=2):
            try:
                p, r = float(row["precision"]), float(row[rec_col])
            except (TypeError, ValueError):
                raise ReportError(path, f"line {k}: non-numeric precision/{rec_col}") from None
            rows.append({"model": row.get("model") or f"{path.stem}#{k - 1}", "precision": p, "repeatability": r})
    return rows


def comparison_rows(rows: Sequence[dict]) -> list[dict]:
    out = []
    for row in rows:
        p, r = row["precision"], row["repeatability"]
        out.append({**row, "f1": f1(p, r), "arithmetic_mean": (p + r) / 2})
    return out


def markdown(rows: Sequence[dict]) -> str:
    lines = [
        "| Model | Repeatability | Matching precision | Harmonic mean |",
        "|---|---|---|---|",
    ]
    for row in rows:
        lines.append(f"| {row['model']} | {row['repeatability']:.4f} | {row['precision']:.4f} | {row['f1']:.4f} |")
    lines += [
        "",
        "| Precision | Recall | Harmonic mean (F1) | Arithmetic mean |",
        "|---|---|---|---|",
    ]
    for row in rows:
        lines.append(f"| {row['precision']:.2f} | {row['repeatability']:.2f} | {row['f1']:.2f} | {row['arithmetic_mean']:.2f} |")
    return "\n".join(lines) + "\n"


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "precision", "repeatability", "f1", "arithmetic_mean", "f1_2dp", "arithmetic_mean_2dp"])
        for row in rows:
            w.writerow([
                row["model"],
                _fmt(row["precision"]),
                _fmt(row["repeatability"]),
                _fmt(row["f1"]),
                _fmt(row["arithmetic_mean"]),
                f"{row['f1']:.2f}",
                f"{row['arithmetic_mean']:.2f}",
            ])


def plot_metrics(rows: Sequence[dict], path) -> None:
    labels = [r["model"] for r in rows]
    series = [("repeatability", "Repeatability"), ("precision", "Matching precision"), ("f1", "Harmonic mean")]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(rows) + 2), 3.2), dpi=120)
    width = 0.8 / len(series)
    for k, (key, name) in enumerate(series):
        xs = [i + (k - 1) * width for i in range(len(rows))]
        ax.bar(xs, [r[key] for r in rows], width=width, label=name)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def plot_means(rows: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.2), dpi=120)
    am = [r["arithmetic_mean"] for r in rows]
    hm = [r["f1"] for r in rows]
    ax.plot(am, hm, "o", color="k")
    lim = [0, 1]
    ax.plot(lim, lim, ":", color="0.5", lw=1)
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    ax.set_xlabel("arithmetic mean")
    ax.set_ylabel("harmonic mean (F1)")
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def read_history(path) -> dict[str, list[float]]:
    path = Path(path)
    if not path.exists():
        raise ReportError(path, "file not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "step" not in reader.fieldnames:
            raise ReportError(path, "missing column 'step'")
        cols = {c: [] for c in reader.fieldnames}
        for row in reader:
            for c in cols:
                cols[c].append(float(row[c]))
    return cols


def plot_histories(histories: dict[str, dict[str, list[float]]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    for name, cols in histories.items():
        ax.plot(cols["step"], cols["total"], lw=1, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def render_report(inputs: Sequence, out_dir, histories: Sequence = ()) -> dict[str, Path]:
    """Write report.md, report.csv and PNG figures into ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows([r for p in inputs for r in read_metric_rows(p)])
    paths = {"markdown": out / "report.md", "csv": out / "report.csv", "metrics_png": out / "metrics.png", "means_png": out / "means.png"}
    paths["markdown"].write_text(markdown(rows))
    write_report_csv(rows, paths["csv"])
    plot_metrics(rows, paths["metrics_png"])
    plot_means(rows, paths["means_png"])
    if histories:
        hist = {f"{Path(h).parent.name}/{Path(h).stem}": read_history(h) for h in histories}
        paths["loss_png"] = out / "loss.png"
        plot_histories(hist, paths["loss_png"])
    return paths
