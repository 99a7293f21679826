"""Delimited output plus figures for benchmark runs.

Every report writes a TSV of raw samples, a TSV summary, and a PNG next to
them, so the numbers and the picture always come from the same run.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def write_tsv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def summary_rows(summary: dict):
    return [(k, v) for k, v in summary.items()]


def latency_figure(latencies, path, title="LocateRepositories latency", target_ms=10.0):
    """Histogram and empirical CDF of per-query latency, split by hit/miss."""
    groups = {}
    for kind, ms, _ in latencies:
        groups.setdefault(kind, []).append(ms)
    fig, (ax_h, ax_c) = plt.subplots(1, 2, figsize=(10, 4))
    for kind in sorted(groups):
        vals = sorted(groups[kind])
        ax_h.hist(vals, bins=60, alpha=0.6, label=f"{kind} (n={len(vals)})")
        n = len(vals)
        ax_c.step(vals, [(i + 1) / n for i in range(n)], where="post", label=kind)
    for ax in (ax_h, ax_c):
        ax.axvline(target_ms, color="k", ls="--", lw=0.8)
        ax.set_xlabel("latency (ms)")
        ax.legend(frameon=False)
    ax_h.set_ylabel("queries")
    ax_c.set_ylabel("fraction of queries")
    ax_c.set_xscale("log")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def bench_report(report, out_dir, stem="bench_locator"):
    """Write samples, summary and figure for a BenchReport; returns the three paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = write_tsv(out / f"{stem}.tsv", ("kind", "ms", "repositories"),
                        ((k, f"{ms:.4f}", n) for k, ms, n in report.latencies))
    summary = write_tsv(out / f"{stem}_summary.tsv", ("field", "value"), summary_rows(report.summary()))
    fig = latency_figure(report.latencies, out / f"{stem}.png",
                         title=f"LocateRepositories, {report.n_uris:,} URIs, {report.n_queries:,} queries")
    return samples, summary, fig
