"""Low-rank adapters on the linear layers of a frozen :class:`MlpDenoiser`.

Weights follow the ``y = x @ W + b`` convention, so ``W`` has shape
``(in, out)`` and a "column" is one output unit. For an adapted layer with
down projection ``A`` ``(in, r)`` and up projection ``B`` ``(r, out)``::

    V = W + (scale / r) * A @ B
    plain:                W_eff = V
    magnitude_normalized: W_eff = V * (m / ||V||_col)

``B`` starts at zero and ``m`` at the column norms of ``W``, so both variants
start as the identity on the frozen network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import MlpDenoiser, TrainConfig, optimize
from .schedule import NoiseSchedule

VARIANTS = ("plain", "magnitude_normalized")


class AdapterError(ValueError):
    pass


@dataclass
class LowRankAdapter:
    layer: int
    rank: int
    scale: float
    variant: str
    down: np.ndarray
    up: np.ndarray
    magnitude: np.ndarray | None = None

    @property
    def factor(self) -> float:
        return self.scale / self.rank

    @property
    def num_trainable(self) -> int:
        n = self.down.size + self.up.size
        return n + (self.magnitude.size if self.magnitude is not None else 0)

    def effective(self, W: np.ndarray):
        """Return ``(W_eff, V, col_norms)``; the last two are ``None`` when unused."""
        V = W + self.factor * (self.down @ self.up)
        if self.variant == "plain":
            return V, None, None
        norms = np.sqrt(np.sum(V * V, axis=0))
        return V * (self.magnitude / norms), V, norms

    def grads(self, G: np.ndarray, V, norms) -> dict:
        """Map the gradient wrt ``W_eff`` onto the adapter's parameters."""
        out = {}
        if self.variant == "magnitude_normalized":
            proj = np.sum(G * V, axis=0)
            out["m"] = proj / norms
            G = G * (self.magnitude / norms) - V * (self.magnitude * proj / norms**3)
        out["A"] = self.factor * (G @ self.up.T)
        out["B"] = self.factor * (self.down.T @ G)
        return out

    def copy(self) -> LowRankAdapter:
        return LowRankAdapter(self.layer, self.rank, self.scale, self.variant, self.down.copy(),
                              self.up.copy(),
                              None if self.magnitude is None else self.magnitude.copy())


class AdaptedDenoiser:
    """A frozen base network plus per-layer adapters.

    Only adapter arrays are exposed through :meth:`trainable_params`; the base
    parameters are read but never written.
    """

    def __init__(self, base: MlpDenoiser, adapters: dict[int, LowRankAdapter]):
        self.base = base
        self.adapters = adapters
        self.dim = base.dim
        self.num_labels = base.num_labels

    def trainable_params(self) -> dict:
        p = {}
        for i, a in sorted(self.adapters.items()):
            p[f"A{i}"] = a.down
            p[f"B{i}"] = a.up
            if a.magnitude is not None:
                p[f"m{i}"] = a.magnitude
        return p

    @property
    def num_trainable(self) -> int:
        return sum(a.num_trainable for a in self.adapters.values())

    def _weights(self):
        weights = dict(self.base.params)
        extras = {}
        for i, a in self.adapters.items():
            weights[f"W{i}"], V, norms = a.effective(self.base.params[f"W{i}"])
            extras[i] = (V, norms)
        return weights, extras

    def forward(self, z_t, cond, t):
        weights, extras = self._weights()
        out, cache = self.base.forward(z_t, cond, t, weights)
        return out, (cache, weights, extras)

    def backward(self, cache, grad_out) -> dict:
        base_cache, weights, extras = cache
        g = self.base.backward(base_cache, grad_out, weights)
        grads = {}
        for i, a in self.adapters.items():
            for k, v in a.grads(g[f"W{i}"], *extras[i]).items():
                grads[f"{k}{i}"] = v
        return grads

    def eps(self, z_t, cond, t):
        z = np.asarray(z_t, dtype=np.float64)
        if z.ndim == 1:
            return self.forward(z[None], cond, t)[0][0]
        return self.forward(z, cond, t)[0]

    def merged(self) -> MlpDenoiser:
        """Materialize ``W_eff`` into a plain network."""
        weights, _ = self._weights()
        return MlpDenoiser(**self.base.config(), params={k: v.copy() for k, v in weights.items()})

    def copy(self) -> AdaptedDenoiser:
        return AdaptedDenoiser(self.base, {i: a.copy() for i, a in self.adapters.items()})

    def adapter_config(self) -> dict:
        return {str(i): {"rank": a.rank, "scale": a.scale, "variant": a.variant}
                for i, a in sorted(self.adapters.items())}


def inject(net, layer_ids=None, rank: int = 4, scale: float = 4.0, variant: str = "plain",
           seed=0) -> AdaptedDenoiser:
    """Attach fresh adapters to ``layer_ids`` (default: every hidden layer).

    ``net`` may be a plain network or an already adapted one, in which case
    the new adapters join the existing ones.

    Raises:
        AdapterError: unknown layer or variant, rank above ``min(in, out)``,
            or a layer that already carries an adapter.
    """
    if isinstance(net, AdaptedDenoiser):
        base, existing = net.base, dict(net.adapters)
    else:
        base, existing = net, {}
    if layer_ids is None:
        layer_ids = base.hidden_layer_ids
    if variant not in VARIANTS:
        raise AdapterError(f"unknown adapter variant {variant!r}")
    if rank < 1 or scale <= 0:
        raise AdapterError("rank and scale must be positive")
    rng = np.random.default_rng(seed)
    adapters = dict(existing)
    for i in layer_ids:
        if f"W{i}" not in base.params:
            raise AdapterError(f"layer {i} does not exist")
        if i in adapters:
            raise AdapterError(f"layer {i} already has an adapter")
        W = base.params[f"W{i}"]
        fan_in, fan_out = W.shape
        if rank > min(fan_in, fan_out):
            raise AdapterError(f"rank {rank} exceeds min layer width {min(fan_in, fan_out)}")
        down = rng.standard_normal((fan_in, rank)) / np.sqrt(fan_in)
        up = np.zeros((rank, fan_out))
        mag = np.sqrt(np.sum(W * W, axis=0)) if variant == "magnitude_normalized" else None
        adapters[i] = LowRankAdapter(i, rank, float(scale), variant, down, up, mag)
    return AdaptedDenoiser(base, adapters)


def finetune_adapters(adapted: AdaptedDenoiser, ft_set, s: NoiseSchedule,
                      cfg: TrainConfig):
    """Fine-tune a copy of the adapters on ``ft_set`` with the noise-regression loss.

    ``ft_set`` is a :class:`~mitune.pipeline.FineTuneSet` or a ``(cond, z0)``
    pair. Returns ``(adapted_copy, loss_trace)``.
    """
    data = ft_set.as_dataset() if hasattr(ft_set, "as_dataset") else ft_set
    if len(data[1]) == 0:
        raise ValueError("fine-tune set is empty")
    tuned = adapted.copy()
    trace = optimize(tuned, data, s, cfg)
    return tuned, trace
