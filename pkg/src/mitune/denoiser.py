"""Noise-prediction networks and their training loop.

Two denoisers share the ``eps(z_t, cond, t)`` call:

* :class:`OracleDenoiser` evaluates the Bayes-optimal prediction of a
  :class:`~mitune.gaussian_world.GaussianWorld`.
* :class:`MlpDenoiser` is a small MLP over ``[z_t, time features, label
  embedding]`` with SiLU activations and hand-written reverse-mode gradients.

Conditions for label models are integer arrays with ``NULL`` (-1) marking
rows that use the unconditional embedding row.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .gaussian_world import NULL, GaussianWorld, forward_noise, optimal_eps, sample_joint
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def time_features(t, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal features of integer steps, shape ``(n, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


class OracleDenoiser:
    """Analytic denoiser backed by a world's closed-form score."""

    def __init__(self, world: GaussianWorld, schedule: NoiseSchedule, *, noisy: bool = False):
        self.world = world
        self.schedule = schedule
        self.noisy = noisy
        self.dim = world.dim

    def eps(self, z_t, cond, t):
        return optimal_eps(self.world, z_t, cond, self.schedule, t, noisy=self.noisy)


class MlpDenoiser:
    """Conditional MLP noise predictor ``eps_theta(z_t, c, t)``.

    Parameters live in ``self.params`` as named float64 arrays:
    ``cond_emb`` with one row per label plus a final row for the null
    condition, then ``W{i}``/``b{i}`` for each linear layer ``i``.
    Layers ``0 .. n_layers - 2`` are hidden (followed by SiLU); the last
    layer maps to the data dimension.
    """

    def __init__(self, dim: int, num_labels: int, hidden=(64, 64), time_dim: int = 16,
                 cond_dim: int = 8, seed=0, *, params: dict | None = None):
        self.dim = int(dim)
        self.num_labels = int(num_labels)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.time_dim + self.cond_dim, *self.hidden, self.dim]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def hidden_layer_ids(self) -> list[int]:
        return list(range(self.n_layers - 1))

    def _init_params(self, rng) -> dict:
        p = {"cond_emb": rng.standard_normal((self.num_labels + 1, self.cond_dim))}
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            p[f"W{i}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            p[f"b{i}"] = np.zeros(fan_out)
        return p

    def config(self) -> dict:
        return {"dim": self.dim, "num_labels": self.num_labels, "hidden": list(self.hidden),
                "time_dim": self.time_dim, "cond_dim": self.cond_dim}

    def copy(self) -> MlpDenoiser:
        return MlpDenoiser(**self.config(), params={k: v.copy() for k, v in self.params.items()})

    def trainable_params(self) -> dict:
        return self.params

    def _rows(self, cond, n: int) -> np.ndarray:
        if cond is None:
            labels = np.full(n, NULL)
        else:
            labels = np.broadcast_to(np.asarray(cond), (n,))
            if not np.issubdtype(labels.dtype, np.integer):
                raise TypeError("MlpDenoiser conditions must be integer labels or None")
        if np.any((labels < NULL) | (labels >= self.num_labels)):
            raise ValueError(f"labels must be in 0..{self.num_labels - 1} or NULL")
        return np.where(labels == NULL, self.num_labels, labels)

    def forward(self, z_t, cond, t, weights: dict | None = None):
        """Evaluate with optional substitute ``weights``; returns ``(out, cache)``."""
        w = self.params if weights is None else weights
        z = np.asarray(z_t, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"z_t must have shape (n, {self.dim}), got {z.shape}")
        n = z.shape[0]
        rows = self._rows(cond, n)
        tf = time_features(np.broadcast_to(t, (n,)), self.time_dim)
        h = np.concatenate([z, tf, w["cond_emb"][rows]], axis=1)
        acts, gates = [h], []
        for i in range(self.n_layers):
            pre = h @ w[f"W{i}"] + w[f"b{i}"]
            if i < self.n_layers - 1:
                h, s = _silu(pre)
                gates.append((pre, s))
            else:
                h = pre
            acts.append(h)
        return h, (acts, gates, rows)

    def backward(self, cache, grad_out, weights: dict | None = None) -> dict:
        """Gradients of ``sum(grad_out * out)`` with respect to every parameter."""
        w = self.params if weights is None else weights
        acts, gates, rows = cache
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                pre, s = gates[i]
                g = g * (s + pre * s * (1.0 - s))
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ w[f"W{i}"].T
        emb_grad = np.zeros_like(w["cond_emb"])
        np.add.at(emb_grad, rows, g[:, self.dim + self.time_dim:])
        grads["cond_emb"] = emb_grad
        return grads

    def eps(self, z_t, cond, t):
        z = np.asarray(z_t, dtype=np.float64)
        if z.ndim == 1:
            return self.forward(z[None], cond, t)[0][0]
        return self.forward(z, cond, t)[0]


def eval_eps(net, z_t, cond, t):
    """Evaluate ``net`` with input validation.

    Raises:
        ValueError: dimension mismatch, non-finite weights or output.
    """
    z = np.asarray(z_t, dtype=np.float64)
    if z.shape[-1] != net.dim:
        raise ValueError(f"z_t has dimension {z.shape[-1]}, denoiser expects {net.dim}")
    params = getattr(net, "params", None)
    if params is not None and not all(np.all(np.isfinite(v)) for v in params.values()):
        raise ValueError("denoiser has non-finite weights")
    out = net.eps(z, cond, t)
    if not np.all(np.isfinite(out)):
        raise ValueError("denoiser produced non-finite output")
    return out


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    iterations: int = 2000
    p_drop: float = 0.1
    t_lo: int = 1
    t_hi: int | None = None  # None means T
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    seed: int = 0

    def window(self, T: int) -> tuple[int, int]:
        hi = T if self.t_hi is None else self.t_hi
        if not 1 <= self.t_lo <= hi <= T:
            raise ValueError(f"timestep window [{self.t_lo}, {hi}] not inside [1, {T}]")
        return self.t_lo, hi

    def validate(self, T: int) -> None:
        self.window(T)
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("batch_size, iterations and lr must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def loss_simple(net, batch, s: NoiseSchedule, cfg: TrainConfig, rng):
    """Noise-regression loss on one batch and its gradients.

    ``batch`` is ``(cond, z0)``. Each row draws ``t ~ U{t_lo..t_hi}`` and
    ``eps ~ N(0, I)``, and its condition is replaced by ``NULL`` with
    probability ``p_drop``. The loss is the batch mean of
    ``||eps - eps_theta(z_t, c, t)||^2``.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like ``net.trainable_params()``.
    """
    cond, z0 = batch
    z0 = np.asarray(z0, dtype=np.float64)
    n = z0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    lo, hi = cfg.window(s.T)
    t = rng.integers(lo, hi + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    drop = rng.random(n) < cfg.p_drop
    cond = np.where(drop, NULL, np.asarray(cond))
    z_t = forward_noise(z0, s, t, eps)
    out, cache = net.forward(z_t, cond, t)
    resid = out - eps
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    grads = net.backward(cache, 2.0 * resid / n)
    return loss, grads


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, weight_decay=1e-2, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.weight_decay, self.eps = weight_decay, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: dict) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def _batch_source(data, batch_size: int):
    """Return ``draw(rng) -> (cond, z0)`` over a world or a fixed dataset."""
    if isinstance(data, GaussianWorld):
        def draw(rng):
            return sample_joint(data, batch_size, rng)
        return draw
    cond, z0 = (np.asarray(a) for a in data)
    if z0.shape[0] == 0:
        raise ValueError("empty training set")

    def draw(rng):
        idx = rng.integers(0, z0.shape[0], size=batch_size)
        return cond[idx], z0[idx]
    return draw


def optimize(net, data, s: NoiseSchedule, cfg: TrainConfig) -> list[float]:
    """Run ``cfg.iterations`` AdamW steps on ``net.trainable_params()`` in place."""
    cfg.validate(s.T)
    rng = np.random.default_rng(cfg.seed)
    draw = _batch_source(data, cfg.batch_size)
    opt = AdamW(net.trainable_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
                cfg.adam_eps)
    trace = []
    for it in range(cfg.iterations):
        loss, grads = loss_simple(net, draw(rng), s, cfg, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        clip_grad_norm(grads, cfg.grad_clip)
        opt.step(grads)
        trace.append(loss)
    return trace


def train(net: MlpDenoiser, data, s: NoiseSchedule, cfg: TrainConfig):
    """Train a copy of ``net`` on a world (fresh batches) or a ``(cond, z0)`` dataset.

    Returns:
        ``(trained_net, loss_trace)``; the input net is left untouched.
    """
    trained = net.copy()
    trace = optimize(trained, data, s, cfg)
    return trained, trace


def validation_loss(net, batch, s: NoiseSchedule, cfg: TrainConfig, seed=12345) -> float:
    """Loss on a fixed batch with fixed noise draws (no parameter update)."""
    return loss_simple(net, batch, s, cfg, np.random.default_rng(seed))[0]
