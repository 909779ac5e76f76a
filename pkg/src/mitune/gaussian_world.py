"""Toy (condition, data) worlds with closed-form scores.

Two modes are supported:

``correlated_gaussian``
    Condition ``p ~ N(0, I_d)`` and data ``z = rho * p + sqrt(1 - rho^2) * u``.
    Each coordinate pair is bivariate normal with unit marginals and
    correlation ``rho``; MI is ``-(d/2) log(1 - rho^2)`` nats.

``labeled_mixture``
    Label ``c`` uniform over ``C`` classes and ``z | c ~ N(mu_c, sigma^2 I)``.
    Training pairs may carry a wrong label with probability ``label_noise``,
    which is how a misaligned base model is manufactured.

Every density here is Gaussian or a finite Gaussian mixture, so forward
noising keeps it in closed form: a component ``N(m, v I)`` at step ``t``
becomes ``N(sqrt(abar_t) m, (abar_t v + 1 - abar_t) I)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .schedule import NoiseSchedule

NULL = -1  # label code of the null condition; never a valid class index
MODES = ("correlated_gaussian", "labeled_mixture")


@dataclass(frozen=True)
class GaussianWorld:
    dim: int
    mode: str
    rho: float = 0.0
    means: np.ndarray | None = None
    data_sigma: float = 1.0
    label_noise: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown world mode {self.mode!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.mode == "correlated_gaussian":
            if not -1.0 < self.rho < 1.0:
                raise ValueError("rho must lie in (-1, 1)")
        else:
            means = np.array(self.means, dtype=np.float64)
            if means.ndim != 2 or means.shape[1] != self.dim or means.shape[0] < 1:
                raise ValueError("means must have shape (num_labels, dim)")
            if self.data_sigma <= 0:
                raise ValueError("data_sigma must be positive")
            if not 0.0 <= self.label_noise < 1.0:
                raise ValueError("label_noise must lie in [0, 1)")
            if self.label_noise > 0 and means.shape[0] < 2:
                raise ValueError("label noise needs at least two labels")
            means.setflags(write=False)
            object.__setattr__(self, "means", means)

    @classmethod
    def correlated(cls, dim: int, rho: float) -> GaussianWorld:
        return cls(dim=dim, mode="correlated_gaussian", rho=float(rho))

    @classmethod
    def mixture(cls, means, data_sigma: float = 0.3, label_noise: float = 0.0) -> GaussianWorld:
        means = np.asarray(means, dtype=np.float64)
        return cls(dim=means.shape[1], mode="labeled_mixture", means=means,
                   data_sigma=float(data_sigma), label_noise=float(label_noise))

    @property
    def num_labels(self) -> int:
        return 0 if self.means is None else self.means.shape[0]

    @property
    def is_mixture(self) -> bool:
        return self.mode == "labeled_mixture"

    def params(self) -> dict:
        out = {"mode": self.mode, "dim": self.dim}
        if self.is_mixture:
            out.update(means=self.means.tolist(), data_sigma=self.data_sigma,
                       label_noise=self.label_noise)
        else:
            out["rho"] = self.rho
        return out


def ring_means(num_labels: int, dim: int = 2, radius: float = 2.0) -> np.ndarray:
    """Place ``num_labels`` means evenly on a circle in the first two coordinates."""
    if dim < 2 and num_labels > 2:
        raise ValueError("more than two ring means need dim >= 2")
    means = np.zeros((num_labels, dim))
    if dim == 1:
        means[:, 0] = np.linspace(-radius, radius, num_labels) if num_labels > 1 else 0.0
        return means
    angles = 2.0 * np.pi * np.arange(num_labels) / num_labels
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def sample_joint(w: GaussianWorld, n: int, seed, *, return_true_labels: bool = False):
    """Draw ``n`` independent (condition, data) pairs.

    Returns ``(cond, z)``: in correlated mode ``cond`` is an ``(n, d)`` array,
    in mixture mode an ``(n,)`` integer array of observed (possibly flipped)
    labels. With ``return_true_labels`` the clean labels are appended.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if not w.is_mixture:
        p = rng.standard_normal((n, w.dim))
        z = w.rho * p + np.sqrt(1.0 - w.rho**2) * rng.standard_normal((n, w.dim))
        return (p, z, None) if return_true_labels else (p, z)
    C = w.num_labels
    true = rng.integers(0, C, size=n)
    z = w.means[true] + w.data_sigma * rng.standard_normal((n, w.dim))
    labels = true.copy()
    if w.label_noise > 0:
        flip = rng.random(n) < w.label_noise
        # uniform over the C - 1 wrong labels
        shift = rng.integers(1, C, size=n)
        labels[flip] = (true[flip] + shift[flip]) % C
    return (labels, z, true) if return_true_labels else (labels, z)


def _as_batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    return (z[None, :] if single else z), single


def _label_array(w: GaussianWorld, cond, n: int) -> np.ndarray:
    if cond is None:
        return np.full(n, NULL)
    labels = np.broadcast_to(np.asarray(cond), (n,)).astype(np.int64)
    if np.any((labels < NULL) | (labels >= w.num_labels)):
        raise ValueError(f"labels must be in 0..{w.num_labels - 1} or NULL")
    return labels


def mode_log_weights(w: GaussianWorld, labels: np.ndarray, noisy: bool = False) -> np.ndarray:
    """Log mixture weights over modes for each label; rows for NULL are uniform.

    With ``noisy`` the weights describe the label-noise-corrupted conditional,
    ``1 - eta`` on the named mode and ``eta / (C - 1)`` elsewhere.
    """
    C = w.num_labels
    probs = np.zeros((labels.size, C))
    named = labels != NULL
    if noisy and w.label_noise > 0:
        probs[named] = w.label_noise / (C - 1)
        probs[named, labels[named]] = 1.0 - w.label_noise
    else:
        probs[named, labels[named]] = 1.0
    probs[~named] = 1.0 / C
    with np.errstate(divide="ignore"):
        return np.log(probs)


def _mixture_stats(w, z, log_weights, abar):
    """Log density and posterior mode responsibilities of a noised mixture."""
    abar = np.asarray(abar, dtype=np.float64).reshape(-1, 1)
    var = abar * w.data_sigma**2 + (1.0 - abar)  # (n, 1)
    centers = np.sqrt(abar)[:, :, None] * w.means[None, :, :]  # (n, C, d)
    diff = z[:, None, :] - centers
    sq = np.sum(diff**2, axis=-1)  # (n, C)
    log_comp = log_weights - 0.5 * sq / var - 0.5 * w.dim * np.log(2.0 * np.pi * var)
    top = np.max(log_comp, axis=1, keepdims=True)
    e = np.exp(log_comp - top)
    total = e.sum(axis=1, keepdims=True)
    return (top + np.log(total))[:, 0], e / total, diff, var


def optimal_eps(w: GaussianWorld, z_t, cond, s: NoiseSchedule, t, *, noisy: bool = False):
    """Bayes-optimal noise prediction ``-sqrt(1 - abar_t) * grad log q_t(z_t | cond)``.

    Args:
        w: The world.
        z_t: Noisy data, shape ``(d,)`` or ``(n, d)``.
        cond: ``None`` for the null condition; an ``(n, d)`` (or ``(d,)``)
            vector in correlated mode; integer labels (``NULL`` allowed
            per row) in mixture mode.
        s: Noise schedule.
        t: Step index, scalar or ``(n,)``.
        noisy: Mixture mode only; score the label-noise-corrupted
            conditional instead of the clean one.
    """
    z, single = _as_batch(z_t)
    n = z.shape[0]
    if z.shape[1] != w.dim:
        raise ValueError(f"z_t has dimension {z.shape[1]}, world has {w.dim}")
    abar = np.broadcast_to(s.at("alpha_bars", t), (n,))[:, None]
    sq1m = np.sqrt(1.0 - abar)
    if not w.is_mixture:
        if cond is None:
            out = sq1m * z  # marginal is N(0, I) at every step
        else:
            p, _ = _as_batch(cond)
            if p.shape[1] != w.dim:
                raise ValueError("condition vector dimension mismatch")
            var = abar * (1.0 - w.rho**2) + (1.0 - abar)
            out = sq1m * (z - np.sqrt(abar) * w.rho * p) / var
    else:
        labels = _label_array(w, cond, n)
        _, resp, diff, var = _mixture_stats(w, z, mode_log_weights(w, labels, noisy), abar)
        out = sq1m * np.einsum("nc,ncd->nd", resp, diff) / var
    return out[0] if single else out


def log_density(w: GaussianWorld, z, cond, *, noisy: bool = False) -> np.ndarray:
    """Log density of clean data ``z`` given ``cond`` (``None`` for the marginal)."""
    z, single = _as_batch(z)
    n = z.shape[0]
    if not w.is_mixture:
        if cond is None:
            mean, var = np.zeros_like(z), 1.0
        else:
            p, _ = _as_batch(cond)
            mean, var = w.rho * p, 1.0 - w.rho**2
        out = -0.5 * np.sum((z - mean) ** 2, axis=1) / var - 0.5 * w.dim * np.log(2 * np.pi * var)
    else:
        labels = _label_array(w, cond, n)
        out, *_ = _mixture_stats(w, z, mode_log_weights(w, labels, noisy), np.ones(n))
    return out[0] if single else out


def log_likelihood_ratio(w: GaussianWorld, z, cond) -> np.ndarray:
    """Point-wise MI ``log q(z | cond) - log q(z)`` under the clean world."""
    return log_density(w, z, cond) - log_density(w, z, None)


class MiReference(NamedTuple):
    value: float
    stderr: float


def closed_form_mi(w: GaussianWorld, n: int = 100_000, seed=0) -> MiReference:
    """Ground-truth MI in nats.

    Exact in correlated mode. Mixture MI has no closed form, so it is the
    Monte Carlo mean of the log-likelihood ratio over ``n`` clean joint
    samples, reported with its standard error.
    """
    if not w.is_mixture:
        return MiReference(-0.5 * w.dim * np.log1p(-w.rho**2), 0.0)
    clean = GaussianWorld.mixture(w.means, w.data_sigma, 0.0)
    labels, z = sample_joint(clean, n, seed)
    llr = log_likelihood_ratio(clean, z, labels)
    return MiReference(float(llr.mean()), float(llr.std(ddof=1) / np.sqrt(n)))


def nearest_mode(w: GaussianWorld, z) -> np.ndarray:
    z, _ = _as_batch(z)
    d2 = np.sum((z[:, None, :] - w.means[None]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def forward_noise(z0, s: NoiseSchedule, t, eps) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    abar = np.asarray(s.at("alpha_bars", t), dtype=np.float64)
    if abar.ndim:
        abar = abar[:, None]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
