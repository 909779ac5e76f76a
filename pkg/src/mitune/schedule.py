"""Discrete-time noise schedules.

Steps are indexed ``t = 1..T``; ``t = 0`` denotes clean data and is never
looked up in the tables. Arrays are stored zero-based, so the value for
step ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear",)


class ScheduleError(ValueError):
    """Invalid schedule parameters or step index."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables derived from a beta sequence.

    Attributes:
        T: Number of diffusion steps.
        betas: Forward noise variance per step.
        alphas: ``1 - betas``.
        alpha_bars: Cumulative products of ``alphas``.
        sigmas: Reverse-step noise scale, ``sqrt(betas)``.
        kappas: MI weights ``beta * T / (2 * alpha * (1 - alpha_bar))``.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    kappas: np.ndarray = field(repr=False)
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    kind: str = "linear"

    @classmethod
    def from_betas(cls, betas, **meta) -> NoiseSchedule:
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("every beta must lie in (0, 1)")
        T = betas.size
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not np.all(np.diff(alpha_bars) < 0) or alpha_bars[-1] <= 0.0:
            raise ScheduleError("alpha_bar underflows; the schedule destroys the signal "
                                "faster than float64 can represent")
        sigmas = np.sqrt(betas)
        kappas = betas * T / (2.0 * alphas * (1.0 - alpha_bars))
        for arr in (betas, alphas, alpha_bars, sigmas, kappas):
            arr.setflags(write=False)
        return cls(T, betas, alphas, alpha_bars, sigmas, kappas, **meta)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ScheduleError(f"step index must be an integer, got {t.dtype}")
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ScheduleError(f"step index out of range 1..{self.T}")

    def at(self, name: str, t):
        """Look up table ``name`` at (1-based) step ``t``; ``t`` may be an array."""
        self.check_step(t)
        return getattr(self, name)[np.asarray(t) - 1]

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "kind": self.kind}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> NoiseSchedule:
    """Build a schedule with betas spaced evenly from ``beta_start`` to ``beta_end``.

    Raises:
        ScheduleError: non-positive ``T``, bounds outside (0, 1), inverted
            bounds or an unknown ``kind``.
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule.from_betas(betas, beta_start=float(beta_start),
                                    beta_end=float(beta_end), kind=kind)


def kappa_at(s: NoiseSchedule, t) -> float:
    """Weight applied to the squared conditional/unconditional noise gap at step ``t``."""
    return s.at("kappas", t)
