"""CSV artifacts.

Every file starts with a ``# mitune-csv v1 <kind>`` comment line followed
by a header row. Floats are written with ``repr`` so values round-trip
exactly and repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

CSV_VERSION = 1


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, kind: str, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# mitune-csv v{CSV_VERSION} {kind}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[str, list[dict]]:
    """Return ``(kind, rows)`` with each row a dict of strings."""
    path = Path(path)
    with open(path, newline="") as f:
        first = f.readline()
        if not first.startswith("# mitune-csv"):
            raise ValueError(f"{path}: missing format-version line")
        kind = first.split()[-1]
        return kind, list(csv.DictReader(f))


def write_loss_trace(path, trace) -> Path:
    return write_csv(path, "loss", ["iteration", "loss"], enumerate(trace))


def write_samples(path, cond, z, seeds=None) -> Path:
    """Dump ``(seed?, label, z...)`` rows; vector conditions are flattened as ``p0..``."""
    z = np.atleast_2d(z)
    cond = np.asarray(cond)
    if cond.ndim == 2:
        head = [f"p{i}" for i in range(cond.shape[1])]
        cols = [list(r) for r in cond]
    else:
        head = ["label"]
        cols = [[int(c)] for c in cond]
    header = (["seed"] if seeds is not None else []) + head + [f"z{i}" for i in range(z.shape[1])]
    rows = []
    for j in range(z.shape[0]):
        rows.append(([int(seeds[j])] if seeds is not None else []) + cols[j] + list(z[j]))
    return write_csv(path, "samples", header, rows)


MI_HEADER = ["prompt_id", "sample_id", "seed", "mi", "stderr", "checksum"]


def write_mi_table(path, rows) -> Path:
    """Rows of ``(prompt_id, sample_id, seed, mi, stderr, checksum)``."""
    return write_csv(path, "mi-scores", MI_HEADER, rows)


def write_pool_scores(path, pool) -> Path:
    header = MI_HEADER + ["label", "provenance", "selected"]
    rows = [(p.prompt, p.sample, p.seed, p.mi, p.stderr, p.checksum, p.label, p.provenance,
             p.selected) for p in pool]
    return write_csv(path, "pool-scores", header, rows)


def write_finetune_set(path, ft_set) -> Path:
    dim = len(ft_set.entries[0].z) if ft_set.entries else 0
    header = ["round", "prompt_id", "sample_id", "label", "seed", "mi", "provenance"] + [
        f"z{i}" for i in range(dim)]
    rows = [(ft_set.round_index + 1, e.prompt, e.sample, e.label, e.seed, e.mi, e.provenance,
             *e.z) for e in ft_set.entries]
    return write_csv(path, "finetune-set", header, rows)


METRICS_HEADER = ["round", "alignment_pre", "alignment_pre_stderr", "alignment_post",
                  "alignment_post_stderr", "mean_pool_mi", "mean_selected_mi", "set_size",
                  "final_loss"]


def write_metrics(path, records) -> Path:
    return write_csv(path, "metrics", METRICS_HEADER,
                     ([r[k] for k in METRICS_HEADER] for r in records))


def write_agreement(path, agreements) -> Path:
    rows = [(a.pair[0], a.pair[1], a.mean_tau, a.stderr, a.n) for a in agreements]
    return write_csv(path, "agreement", ["metric_a", "metric_b", "mean_tau", "stderr", "n"], rows)


SCHEDULE_HEADER = ["t", "beta", "alpha", "alpha_bar", "sigma", "kappa"]


def write_schedule(path, s) -> Path:
    rows = zip(range(1, s.T + 1), s.betas, s.alphas, s.alpha_bars, s.sigmas, s.kappas)
    return write_csv(path, "schedule", SCHEDULE_HEADER, rows)


def write_rows(path, kind: str, records: list[dict]) -> Path:
    """Dicts sharing the first record's keys, in that order."""
    header = list(records[0]) if records else []
    return write_csv(path, kind, header, ([r[k] for k in header] for r in records))
