"""Point-wise mutual information between a condition and a sample.

Both estimators average the weighted gap between conditional and
unconditional noise predictions,

    I(z, p) = E_t [ kappa_t * ||eps(z_t, p, t) - eps(z_t, NULL, t)||^2 ],

with ``t`` uniform on ``1..T``. :func:`pointwise_mi_generate` visits every
step of a reverse trajectory and divides the accumulated sum by ``T``
(``kappa_t`` already carries the factor ``T``), while
:func:`pointwise_mi_forward` draws ``(t, eps)`` pairs and noises a given
``z_0`` forward. Values are in nats and are never negative, unlike the true
point-wise MI, which can be.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import eval_eps
from .gaussian_world import NULL, forward_noise
from .sampler import SamplerConfig, combine_guidance, reverse_process, task_seed
from .schedule import NoiseSchedule


class MiEstimationError(RuntimeError):
    pass


@dataclass
class MiEstimate:
    value: float
    per_step: np.ndarray = field(repr=False)
    n_trajectories: int = 1
    stderr: float = float("nan")

    @property
    def checksum(self) -> float:
        """Exactly rounded sum of the per-step contributions."""
        return math.fsum(self.per_step.tolist())


def _check_not_null(cond):
    if cond is None:
        raise ValueError("point-wise MI needs a non-null condition")
    arr = np.asarray(cond)
    if np.issubdtype(arr.dtype, np.integer) and np.any(arr == NULL):
        raise ValueError("point-wise MI needs a non-null condition")


def pointwise_mi_generate(net, cond, s: NoiseSchedule, cfg: SamplerConfig, n: int | None = None,
                          seeds=None, *, score_guided: bool = False):
    """Generate samples and score them in the same reverse loop.

    The trajectory follows the guided prediction with scale
    ``cfg.guidance``; the MI term uses the unguided conditional prediction
    unless ``score_guided`` is set.

    Returns:
        ``(z0, estimate)`` for a single trajectory (neither ``n`` nor
        ``seeds`` given), else ``(z0_batch, [estimate, ...])``.
    """
    _check_not_null(cond)
    single = n is None and seeds is None
    if seeds is None:
        seeds = [task_seed(cfg.seed, j) for j in range(1 if single else n)]
    terms = np.zeros((len(seeds), s.T))
    gamma = cfg.guidance

    def accumulate(t, z_t, eps_c, eps_u):
        diff = (combine_guidance(eps_c, eps_u, gamma) if score_guided else eps_c) - eps_u
        terms[:, t - 1] = s.kappas[t - 1] * np.sum(diff * diff, axis=1) / s.T

    z0 = reverse_process(net, cond, s, gamma, seeds, on_step=accumulate, need_uncond=True)
    if not np.all(np.isfinite(terms)):
        raise MiEstimationError("non-finite MI accumulation; the unconditional branch "
                                "is likely degenerate")
    values = terms.sum(axis=1)
    estimates = [MiEstimate(float(v), row) for v, row in zip(values, terms)]
    return (z0[0], estimates[0]) if single else (z0, estimates)


def _forward_terms(net, z0, cond, s: NoiseSchedule, n_mc: int, rng, chunk: int = 1 << 16):
    """Per-draw ``kappa_t * ||delta eps||^2`` of shape ``(n, n_mc)`` and the steps used."""
    n, d = z0.shape
    t = rng.integers(1, s.T + 1, size=(n, n_mc))
    eps = rng.standard_normal((n, n_mc, d))
    z_rep = np.repeat(z0, n_mc, axis=0)
    t_flat = t.reshape(-1)
    z_t = forward_noise(z_rep, s, t_flat, eps.reshape(-1, d))
    if cond is not None:
        c = np.asarray(cond)
        if c.ndim == 0:
            c = np.full(n, c)
        cond_rep = np.repeat(c, n_mc, axis=0)
    terms = np.empty(n * n_mc)
    for lo in range(0, n * n_mc, chunk):
        sl = slice(lo, lo + chunk)
        diff = (eval_eps(net, z_t[sl], cond_rep[sl], t_flat[sl])
                - eval_eps(net, z_t[sl], None, t_flat[sl]))
        terms[sl] = s.kappas[t_flat[sl] - 1] * np.sum(diff * diff, axis=1)
    return terms.reshape(n, n_mc), t


def pointwise_mi_forward(net, z0, cond, s: NoiseSchedule, n_mc: int = 100,
                         seed=0) -> MiEstimate:
    """Monte Carlo MI estimate for a given sample ``z0`` by forward noising.

    ``stderr`` is the standard error across the ``n_mc`` draws (NaN when
    ``n_mc == 1``). ``per_step[t - 1]`` collects the draws that landed on
    step ``t``, each divided by ``n_mc``, so the entries sum to ``value``.
    """
    _check_not_null(cond)
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    z0 = np.asarray(z0, dtype=np.float64).reshape(1, -1)
    c = None if cond is None else np.asarray(cond)[None]
    terms, t = _forward_terms(net, z0, c, s, n_mc, np.random.default_rng(seed))
    per_step = np.bincount(t[0] - 1, weights=terms[0] / n_mc, minlength=s.T)
    stderr = float(terms[0].std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return MiEstimate(float(terms[0].mean()), per_step, 1, stderr)


def pointwise_mi_forward_batch(net, z0, cond, s: NoiseSchedule, n_mc: int = 1, seed=0):
    """Vectorized :func:`pointwise_mi_forward` over rows of ``z0``.

    Returns ``(values, stderrs)`` arrays of length ``n``.
    """
    _check_not_null(cond)
    z0 = np.asarray(z0, dtype=np.float64)
    terms, _ = _forward_terms(net, z0, cond, s, n_mc, np.random.default_rng(seed))
    stderr = (terms.std(axis=1, ddof=1) / np.sqrt(n_mc) if n_mc > 1
              else np.full(z0.shape[0], np.nan))
    return terms.mean(axis=1), stderr


def aggregate(estimates) -> MiEstimate:
    """Average several single-trajectory estimates into one with a standard error."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("nothing to aggregate")
    values = np.array([e.value for e in estimates])
    per_step = np.mean([e.per_step for e in estimates], axis=0)
    n = sum(e.n_trajectories for e in estimates)
    stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    return MiEstimate(float(values.mean()), per_step, n, stderr)


def _value(item) -> float:
    if isinstance(item, MiEstimate):
        return item.value
    if isinstance(item, tuple):
        return _value(item[-1])
    return float(item)


def rank_by_mi(scored) -> list[int]:
    """Indices sorted by descending MI; equal values keep their original order.

    Items may be :class:`MiEstimate`, plain numbers, or ``(sample, estimate)``
    tuples.
    """
    values = np.array([_value(x) for x in scored], dtype=np.float64)
    if values.size == 0:
        raise ValueError("nothing to rank")
    return np.argsort(-values, kind="stable").tolist()
