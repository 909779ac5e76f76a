"""Static SVG plots for a run directory.

Every plotted number is read from a CSV in the run directory (or written
next to the plot, as for histogram counts). Nothing in the run directory
is modified; output goes to ``<run>/report`` unless another directory is
given. SVG output is made byte-stable by fixing the hash salt and dropping
the date metadata.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_csv, write_csv  # noqa: E402
from .metrics import METRICS  # noqa: E402

REQUIRED = ("config.ini", "schedule.csv", "metrics.csv")
N_BINS = 20


class ReportError(ValueError):
    pass


def _save(fig, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "mitune", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _load(path: Path, kind: str) -> list[dict]:
    try:
        got, rows = read_csv(path)
    except (OSError, ValueError, UnicodeDecodeError) as e:
        raise ReportError(f"cannot read {path}: {e}") from None
    if got != kind:
        raise ReportError(f"{path}: expected a {kind} table, found {got}")
    return rows


def _col(rows, name) -> np.ndarray:
    try:
        return np.array([float(r[name]) for r in rows])
    except (KeyError, ValueError, TypeError) as e:
        raise ReportError(f"corrupt column {name!r}: {e}") from None


def plot_schedule(rows, out: Path) -> Path:
    t = _col(rows, "t")
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(t, _col(rows, "alpha_bar"))
    a.set_xlabel("t")
    a.set_ylabel("alpha_bar_t")
    b.semilogy(t, _col(rows, "kappa"))
    b.set_xlabel("t")
    b.set_ylabel("kappa_t")
    fig.tight_layout()
    return _save(fig, out / "schedule.svg")


def mi_histograms(round_tables: dict[int, list[dict]], out: Path) -> Path:
    """Histogram of pool MI per (round, label); counts go to ``mi_hist_counts.csv``."""
    groups = {}
    for r, rows in sorted(round_tables.items()):
        for row in rows:
            if row["provenance"] != "generated":
                continue
            groups.setdefault((r, int(row["label"])), []).append(float(row["mi"]))
    if not groups:
        raise ReportError("no generated pool scores to plot")
    allv = np.concatenate([np.asarray(v) for v in groups.values()])
    edges = np.histogram_bin_edges(allv, bins=N_BINS)
    count_rows = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for (r, label), vals in sorted(groups.items()):
        counts, _ = np.histogram(vals, bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            count_rows.append((r, label, lo, hi, int(c)))
        ax.stairs(counts, edges, label=f"round {r} label {label}")
    ax.set_xlabel("point-wise MI (nats)")
    ax.set_ylabel("count")
    if len(groups) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    write_csv(out / "mi_hist_counts.csv", "mi-histogram",
              ["round", "label", "bin_lo", "bin_hi", "count"], count_rows)
    return _save(fig, out / "mi_hist.svg")


def plot_alignment(rows, out: Path) -> Path:
    rounds = _col(rows, "round").astype(int)
    pre, post = _col(rows, "alignment_pre"), _col(rows, "alignment_post")
    pre_se, post_se = _col(rows, "alignment_pre_stderr"), _col(rows, "alignment_post_stderr")
    x = np.arange(rounds.size)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(x - 0.2, pre, 0.4, yerr=pre_se, label="pre")
    ax.bar(x + 0.2, post, 0.4, yerr=post_se, label="post")
    ax.set_xticks(x, [str(r) for r in rounds])
    ax.set_xlabel("round")
    ax.set_ylabel("alignment score")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out / "alignment.svg")


def plot_agreement(rows, out: Path) -> Path:
    idx = {m: i for i, m in enumerate(METRICS)}
    mat = np.full((len(METRICS), len(METRICS)), np.nan)
    for r in rows:
        a, b = idx.get(r["metric_a"]), idx.get(r["metric_b"])
        if a is None or b is None:
            raise ReportError(f"unknown metric pair {r['metric_a']}, {r['metric_b']}")
        mat[a, b] = mat[b, a] = float(r["mean_tau"])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu")
    ax.set_xticks(range(len(METRICS)), METRICS)
    ax.set_yticks(range(len(METRICS)), METRICS)
    for i in range(len(METRICS)):
        for j in range(len(METRICS)):
            if np.isfinite(mat[i, j]):
                ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, label="mean Kendall tau")
    fig.tight_layout()
    return _save(fig, out / "agreement.svg")


def build_report(run_dir, out_dir=None) -> list[Path]:
    """Render all plots for ``run_dir``; returns the written paths."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory not found: {run_dir}")
    missing = [f for f in REQUIRED if not (run_dir / f).is_file()]
    if missing:
        raise ReportError(f"{run_dir} is missing expected files: {', '.join(missing)} "
                          f"(expected {', '.join(REQUIRED)} and round_XX/pool_scores.csv)")
    metrics = _load(run_dir / "metrics.csv", "metrics")
    rounds = {}
    for r in _col(metrics, "round").astype(int):
        p = run_dir / f"round_{r:02d}" / "pool_scores.csv"
        if not p.is_file():
            raise ReportError(f"missing pool score table: {p}")
        rounds[r] = _load(p, "pool-scores")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = [plot_schedule(_load(run_dir / "schedule.csv", "schedule"), out),
               mi_histograms(rounds, out), out / "mi_hist_counts.csv",
               plot_alignment(metrics, out)]
    if (run_dir / "agreement.csv").is_file():
        written.append(plot_agreement(_load(run_dir / "agreement.csv", "agreement"), out))
    return written
