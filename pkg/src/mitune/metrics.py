"""Rank agreement between scoring functions.

Rankings are sequences of item ids, best first. Scores become rankings by
sorting in descending order with exact ties broken by ascending item id, so
every ranking is strict and the tie-free tau-a statistic applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .gaussian_world import GaussianWorld, log_likelihood_ratio, nearest_mode
from .mi_estimator import pointwise_mi_generate
from .sampler import SamplerConfig, task_seed
from .schedule import NoiseSchedule

METRICS = ("mi", "llr", "aligned", "random")


def kendall_tau(a, b) -> float:
    """Kendall's tau-a between two strict rankings of the same ids.

    Raises:
        ValueError: different lengths, fewer than two items, duplicate ids
            or different id sets.
    """
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ValueError(f"rankings differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("need at least two items")
    if len(set(a)) != len(a) or len(set(b)) != len(b):
        raise ValueError("rankings contain duplicate ids")
    if set(a) != set(b):
        raise ValueError("rankings are over different ids")
    pos = {item: i for i, item in enumerate(b)}
    rb = np.array([pos[item] for item in a])
    # a's order is 0..n-1, so a pair (i < j) is concordant iff rb[i] < rb[j]
    upper = np.triu(np.sign(rb[None, :] - rb[:, None]), k=1)
    n = len(a)
    return float(upper.sum()) / (n * (n - 1) / 2)


def ranking(scores, ids=None) -> list:
    """Ids ordered by descending score, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = list(range(scores.size)) if ids is None else list(ids)
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))]


@dataclass
class RankTable:
    """Per-item scores under several metrics, all over the same items."""

    ids: list
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self.ids),):
            raise ValueError(f"metric {name!r} scores {values.shape[0]} items, "
                             f"table has {len(self.ids)}")
        self.scores[name] = values

    def subset(self, positions) -> RankTable:
        out = RankTable([self.ids[p] for p in positions])
        for k, v in self.scores.items():
            out.scores[k] = v[list(positions)]
        return out

    def ranking(self, name: str) -> list:
        return ranking(self.scores[name], self.ids)


@dataclass
class Agreement:
    pair: tuple[str, str]
    mean_tau: float
    stderr: float
    n: int


def triplet_positions(mi_values) -> list[int]:
    """Positions of the items ranked 1st, ceil(M/2)-th and last by MI."""
    order = ranking(mi_values)
    M = len(order)
    return [order[0], order[math.ceil(M / 2) - 1], order[-1]]


def score_table(net, world: GaussianWorld, s: NoiseSchedule, label: int, M: int,
                cfg: SamplerConfig, seed) -> RankTable:
    """Generate ``M`` samples for ``label`` and score them under every metric."""
    seeds = [task_seed(seed, label, j) for j in range(M)]
    z, est = pointwise_mi_generate(net, label, s, cfg, seeds=seeds)
    table = RankTable(list(range(M)))
    table.add("mi", [e.value for e in est])
    table.add("llr", log_likelihood_ratio(world, z, np.full(M, label)))
    table.add("aligned", (nearest_mode(world, z) == label).astype(float))
    table.add("random", np.random.default_rng(task_seed(seed, label, M)).random(M))
    return table


def agreement_study(net, world: GaussianWorld, s: NoiseSchedule, n_prompts: int, M: int,
                    cfg: SamplerConfig | None = None, seed=0, pairs=None) -> list[Agreement]:
    """Mean Kendall tau between metric rankings of MI-selected triplets.

    For each prompt (labels cycle through the world's classes) ``M``
    generations are scored; the items ranked 1st, middle and last by MI are
    re-ranked under each metric of a pair and tau is averaged over prompts.
    """
    if not world.is_mixture:
        raise ValueError("agreement study needs a labeled_mixture world")
    if M < 3:
        raise ValueError("need M >= 3 to form triplets")
    cfg = cfg or SamplerConfig(guidance=1.0)
    pairs = pairs or [("mi", "mi"), *combinations(METRICS, 2)]
    taus = {p: [] for p in pairs}
    for i in range(n_prompts):
        label = i % world.num_labels
        table = score_table(net, world, s, label, M, cfg, task_seed(seed, i))
        trip = table.subset(triplet_positions(table.scores["mi"]))
        for a, b in pairs:
            taus[(a, b)].append(kendall_tau(trip.ranking(a), trip.ranking(b)))
    out = []
    for p, vals in taus.items():
        v = np.array(vals)
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append(Agreement(p, float(v.mean()), se, int(v.size)))
    return out
