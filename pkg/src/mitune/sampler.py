"""Ancestral DDPM sampling with classifier-free guidance.

Every trajectory owns a noise stream seeded independently, so a batch of
trajectories gives the same samples as running them one by one (up to
batched floating-point reductions inside the denoiser) and tasks can be
farmed out to workers without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import eval_eps
from .schedule import NoiseSchedule


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    guidance: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


def task_seed(base_seed: int, *key: int) -> int:
    """Independent 63-bit seed for task ``key`` under ``base_seed``."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def combine_guidance(eps_cond, eps_uncond, gamma: float):
    """``eps_uncond + gamma * (eps_cond - eps_uncond)``; exactly ``eps_cond`` at gamma 1."""
    if gamma == 1.0:
        return eps_cond
    return eps_uncond + gamma * (eps_cond - eps_uncond)


def guided_eps(net, z_t, cond, t, gamma: float):
    """Classifier-free guided noise prediction."""
    eps_c = eval_eps(net, z_t, cond, t)
    if gamma == 1.0:
        return eps_c
    eps_u = eval_eps(net, z_t, None, t)
    return combine_guidance(eps_c, eps_u, gamma)


def ddpm_step(z_t, t: int, eps_hat, w, s: NoiseSchedule):
    """One reverse step ``z_t -> z_{t-1}`` with ``sigma_t = sqrt(beta_t)``.

    ``w`` is the standard-normal draw for this step; pass zeros at ``t = 1``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z_t.shape != eps_hat.shape or z_t.shape != w.shape:
        raise ValueError(f"shape mismatch: z_t {z_t.shape}, eps {eps_hat.shape}, w {w.shape}")
    s.check_step(t)
    i = t - 1
    coef = s.betas[i] / np.sqrt(1.0 - s.alpha_bars[i])
    return (z_t - coef * eps_hat) / np.sqrt(s.alphas[i]) + s.sigmas[i] * w


def noise_streams(seeds, T: int, dim: int):
    """Per-trajectory initial latents ``(n, d)`` and step noise ``(T, n, d)``.

    ``noise[t - 1]`` is the draw used at step ``t``; the ``t = 1`` slice is zero.
    """
    n = len(seeds)
    z_T = np.empty((n, dim))
    noise = np.empty((T, n, dim))
    for j, seed in enumerate(seeds):
        rng = np.random.default_rng(int(seed))
        z_T[j] = rng.standard_normal(dim)
        noise[:, j, :] = rng.standard_normal((T, dim))
    noise[0] = 0.0
    return z_T, noise


def reverse_process(net, cond, s: NoiseSchedule, gamma: float, seeds, on_step=None,
                    need_uncond: bool = False):
    """Run ``T`` guided reverse steps for ``len(seeds)`` trajectories.

    ``on_step(t, z_t, eps_cond, eps_uncond)`` is called before each update.
    Returns the final ``z_0`` batch.
    """
    dim = net.dim
    z, noise = noise_streams(seeds, s.T, dim)
    n = z.shape[0]
    if cond is not None and np.ndim(cond) == 0:
        cond = np.full(n, cond)
    uncond_needed = need_uncond or gamma != 1.0
    for t in range(s.T, 0, -1):
        eps_c = eval_eps(net, z, cond, t)
        eps_u = eval_eps(net, z, None, t) if uncond_needed else None
        if on_step is not None:
            on_step(t, z, eps_c, eps_u)
        z = ddpm_step(z, t, combine_guidance(eps_c, eps_u, gamma) if eps_u is not None else eps_c,
                      noise[t - 1], s)
        if not np.all(np.isfinite(z)):
            bad = int(np.sum(~np.all(np.isfinite(z), axis=1)))
            raise SamplingError(f"non-finite state at step {t}: {bad}/{n} trajectories")
    return z


def generate(net, cond, s: NoiseSchedule, cfg: SamplerConfig, n: int | None = None,
             seeds=None) -> np.ndarray:
    """Draw samples ``z_0``.

    A single sample (shape ``(d,)``) is returned when neither ``n`` nor
    ``seeds`` is given; otherwise a batch ``(n, d)``. Without explicit
    ``seeds`` trajectory ``j`` uses ``task_seed(cfg.seed, j)``.
    """
    single = n is None and seeds is None
    if seeds is None:
        seeds = [task_seed(cfg.seed, j) for j in range(1 if single else n)]
    z0 = reverse_process(net, cond, s, cfg.guidance, seeds)
    return z0[0] if single else z0
