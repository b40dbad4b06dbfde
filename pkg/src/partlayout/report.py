"""Figures and CSV tables for dataset statistics and optimizer traces."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the PNG bytes identical between runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _hist_axes(ax, hist, threshold, xlabel):
    edges = hist.edges
    widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
    ax.bar(edges[:-1], [max(c, 0) for c in hist.counts], width=widths, align="edge",
           color="0.6", edgecolor="0.2", linewidth=0.5)
    if any(hist.counts):
        ax.set_yscale("log")
    if threshold is not None:
        ax.axvline(threshold, color="red", linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("shapes")


def stats_figure(report, path, iou_threshold=0.10, ratio_threshold=3.0) -> None:
    """Three log-scale histograms (IoU, volume ratio, part count) with red threshold lines."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    _hist_axes(axes[0], report.mean_part_iou, iou_threshold, "mean part IoU")
    _hist_axes(axes[1], report.largest_rest_ratio, ratio_threshold, "largest / rest volume")
    _hist_axes(axes[2], report.part_count, None, "parts")
    fig.tight_layout()
    _save(fig, path)


def trace_figure(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["iteration"] for r in trace], [r["best_score"] for r in trace], color="k", marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean part IoU")
    fig.tight_layout()
    _save(fig, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows))


def histogram_rows(name, hist):
    return [[name, lo, hi, c] for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts)]
