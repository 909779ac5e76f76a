"""Self-supervised MI fine-tuning: build a top-k MI set from the model's own
generations, fine-tune low-rank adapters on it, repeat for several rounds.

Seeds are derived from ``(cfg.seed, round, prompt, sample)`` so any pool
sample can be regenerated from the manifest alone, and pool generation can
run on several threads with identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .adapter import inject, finetune_adapters
from .denoiser import TrainConfig
from .gaussian_world import GaussianWorld, nearest_mode
from .mi_estimator import pointwise_mi_forward_batch, pointwise_mi_generate, rank_by_mi
from .sampler import SamplerConfig, generate, task_seed
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

# second component of task_seed keys, keeps stream families apart
_POOL, _REAL, _INJECT, _FINETUNE, _EVAL = range(5)


@dataclass
class PipelineConfig:
    prompts: list[int]
    M: int = 50
    k: int = 1
    rounds: int = 1
    real_mix_fraction: float = 0.0
    finetune: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    adapter_rank: int = 4
    adapter_scale: float = 4.0
    adapter_variant: str = "magnitude_normalized"
    adapter_layers: list[int] | None = None
    score_guided: bool = False
    eval_per_label: int = 1000
    eval_guidance: float = 1.0
    real_mc: int = 16
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if not self.prompts:
            raise ValueError("prompt set is empty")
        if not 1 <= self.k <= self.M:
            raise ValueError(f"need 1 <= k <= M, got k={self.k}, M={self.M}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 <= self.real_mix_fraction <= 1.0:
            raise ValueError("real_mix_fraction must lie in [0, 1]")


class PoolScore(NamedTuple):
    prompt: int
    label: int
    sample: int
    seed: int
    mi: float
    stderr: float
    checksum: float
    provenance: str
    selected: bool


@dataclass
class FineTuneEntry:
    prompt: int
    label: int
    z: np.ndarray
    mi: float
    provenance: str  # "generated" or "real"
    seed: int
    sample: int


@dataclass
class FineTuneSet:
    entries: list[FineTuneEntry]
    round_index: int
    M: int
    k: int
    pool: list[PoolScore] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def as_dataset(self):
        cond = np.array([e.label for e in self.entries], dtype=np.int64)
        if not self.entries:
            return cond, np.zeros((0, 0))
        return cond, np.array([e.z for e in self.entries], dtype=np.float64)


def _real_count(fraction: float, k: int) -> int:
    return int(np.floor(fraction * k + 0.5))


def _prompt_pool(net, label: int, prompt: int, cfg: PipelineConfig, s: NoiseSchedule,
                 round_index: int):
    seeds = [task_seed(cfg.seed, _POOL, round_index, prompt, j) for j in range(cfg.M)]
    z, est = pointwise_mi_generate(net, label, s, cfg.sampler, seeds=seeds,
                                   score_guided=cfg.score_guided)
    return seeds, z, est


def real_sample(world: GaussianWorld, label: int, seed: int) -> np.ndarray:
    """Clean draw from ``q(z | label)``, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    return world.means[label] + world.data_sigma * rng.standard_normal(world.dim)


def build_set(net, cfg: PipelineConfig, s: NoiseSchedule, round_index: int = 0,
              world: GaussianWorld | None = None) -> FineTuneSet:
    """Generate ``M`` scored samples per prompt and keep the top ``k`` by MI.

    With ``real_mix_fraction > 0`` the lowest-ranked ``x * k`` (rounded half
    up) of the retained generated entries per prompt are swapped for the highest-MI
    clean samples out of ``M`` drawn from ``world``.
    """
    cfg.validate()
    n_real = _real_count(cfg.real_mix_fraction, cfg.k)
    if n_real and world is None:
        raise ValueError("real-data mixing needs the world to draw clean samples from")

    def task(i):
        return _prompt_pool(net, cfg.prompts[i], i, cfg, s, round_index)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            pools = list(ex.map(task, range(len(cfg.prompts))))
    else:
        pools = [task(i) for i in range(len(cfg.prompts))]

    entries, table = [], []
    for i, (label, (seeds, z, est)) in enumerate(zip(cfg.prompts, pools)):
        keep = rank_by_mi(est)[:cfg.k - n_real]
        kept = set(keep)
        for j in range(cfg.M):
            e = est[j]
            table.append(PoolScore(i, label, j, seeds[j], e.value, e.stderr, e.checksum,
                                   "generated", j in kept))
        for j in keep:
            entries.append(FineTuneEntry(i, label, z[j].copy(), est[j].value, "generated",
                                         seeds[j], j))
        if n_real:
            rseeds = [task_seed(cfg.seed, _REAL, round_index, i, j) for j in range(cfg.M)]
            rz = np.array([real_sample(world, label, sd) for sd in rseeds])
            mi, se = pointwise_mi_forward_batch(net, rz, np.full(cfg.M, label), s,
                                                n_mc=cfg.real_mc,
                                                seed=task_seed(cfg.seed, _REAL, round_index, i))
            rkeep = set(rank_by_mi(mi)[:n_real])
            for j in range(cfg.M):
                table.append(PoolScore(i, label, cfg.M + j, rseeds[j], float(mi[j]),
                                       float(se[j]), float(mi[j]), "real", j in rkeep))
            for j in rank_by_mi(mi)[:n_real]:
                entries.append(FineTuneEntry(i, label, rz[j], float(mi[j]), "real", rseeds[j],
                                             cfg.M + j))
    return FineTuneSet(entries, round_index, cfg.M, cfg.k, table)


class Alignment(NamedTuple):
    score: float
    stderr: float
    n: int


def alignment_score(net, world: GaussianWorld, s: NoiseSchedule, n_per_label: int = 1000,
                    guidance: float = 1.0, seed=0, labels=None) -> Alignment:
    """Fraction of conditional generations whose nearest world mean is the requested one."""
    if not world.is_mixture:
        raise ValueError("alignment needs a labeled_mixture world")
    labels = range(world.num_labels) if labels is None else labels
    hits = n = 0
    cfg = SamplerConfig(guidance=guidance)
    for c in labels:
        seeds = [task_seed(seed, _EVAL, c, j) for j in range(n_per_label)]
        z = generate(net, c, s, cfg, seeds=seeds)
        hits += int(np.sum(nearest_mode(world, z) == c))
        n += n_per_label
    frac = hits / n
    return Alignment(frac, float(np.sqrt(frac * (1.0 - frac) / n)), n)


@dataclass
class RoundResult:
    net: object  # AdaptedDenoiser
    ft_set: FineTuneSet
    metrics: dict
    loss_trace: list[float]


def run_round(net, cfg: PipelineConfig, s: NoiseSchedule, world: GaussianWorld,
              round_index: int = 0, pre_alignment: Alignment | None = None) -> RoundResult:
    """Build the set from ``net``, fine-tune fresh adapters on it, score before/after."""
    cfg.validate()
    if pre_alignment is None:
        pre_alignment = alignment_score(net, world, s, cfg.eval_per_label, cfg.eval_guidance,
                                        cfg.seed)
    ft_set = build_set(net, cfg, s, round_index, world)
    adapted = inject(net, cfg.adapter_layers, cfg.adapter_rank, cfg.adapter_scale,
                     cfg.adapter_variant, seed=task_seed(cfg.seed, _INJECT, round_index))
    ft_cfg = replace(cfg.finetune, seed=task_seed(cfg.seed, _FINETUNE, round_index))
    tuned, trace = finetune_adapters(adapted, ft_set, s, ft_cfg)
    post = alignment_score(tuned, world, s, cfg.eval_per_label, cfg.eval_guidance, cfg.seed)
    pool_mi = np.array([p.mi for p in ft_set.pool if p.provenance == "generated"])
    metrics = {
        "round": round_index + 1,
        "alignment_pre": pre_alignment.score,
        "alignment_pre_stderr": pre_alignment.stderr,
        "alignment_post": post.score,
        "alignment_post_stderr": post.stderr,
        "mean_pool_mi": float(pool_mi.mean()),
        "mean_selected_mi": float(np.mean([e.mi for e in ft_set.entries])),
        "set_size": len(ft_set),
        "final_loss": float(trace[-1]) if trace else float("nan"),
    }
    log.info("round %d: alignment %.4f -> %.4f", round_index + 1, pre_alignment.score, post.score)
    return RoundResult(tuned, ft_set, metrics, trace)


def run_mitune(net, cfg: PipelineConfig, s: NoiseSchedule, world: GaussianWorld,
               on_round=None, start_round: int = 0) -> list[RoundResult]:
    """Iterate :func:`run_round`; round ``r`` starts from round ``r - 1``'s merged network.

    Pre-round alignment is always measured on the network the round starts
    from, so resuming at ``start_round`` from a persisted merged checkpoint
    reproduces an uninterrupted run exactly. ``on_round(result, merged)`` is
    called after every round with the merged network (used for persistence).
    """
    cfg.validate()
    results = []
    current = net
    for r in range(start_round, cfg.rounds):
        res = run_round(current, cfg, s, world, r)
        results.append(res)
        current = res.net.merged()
        if on_round is not None:
            on_round(res, current)
    return results


def selection_ratio_sweep(net, cfg: PipelineConfig, s: NoiseSchedule, world: GaussianWorld,
                          ratios=((7, 50), (1, 30), (1, 50), (1, 100), (1, 500))) -> list[dict]:
    """One round per ``(k, M)`` pair; report-only."""
    rows = []
    for k, M in ratios:
        res = run_round(net, replace(cfg, k=k, M=M, rounds=1), s, world)
        rows.append({"k": k, "M": M, **res.metrics})
    return rows


def real_mix_sweep(net, cfg: PipelineConfig, s: NoiseSchedule, world: GaussianWorld,
                   fractions=(0.25, 0.5, 0.9)) -> list[dict]:
    """One round per real-data fraction; report-only."""
    rows = []
    for x in fractions:
        res = run_round(net, replace(cfg, real_mix_fraction=x, rounds=1), s, world)
        rows.append({"real_fraction": x, **res.metrics})
    return rows
