"""Discrete-time noise schedules.

Arrays are indexed by timestep directly: ``beta[t]`` and ``alpha[t]`` are
meaningful for ``t = 1..T`` (index 0 holds NaN), ``alpha_bar[0] = 1`` is the
clean-data timestep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
COSINE = "cosine"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "T": self.T, **self.params}

    @classmethod
    def from_dict(cls, obj) -> "NoiseSchedule":
        return make_schedule(obj["kind"], int(obj["T"]),
                             **{k: v for k, v in obj.items() if k not in ("kind", "T")})


def _from_betas(betas, kind, params):
    T = len(betas)
    beta = np.empty(T + 1)
    beta[0] = np.nan
    beta[1:] = betas
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_bar, kind, dict(params))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    return _from_betas(betas, LINEAR, {"beta_start": beta_start, "beta_end": beta_end})


def cosine_alpha_bar(t, T: int, s: float):
    """Unclipped cosine cumulative product ``g(t) / g(0)``."""
    def g(u):
        return np.cos((np.asarray(u, dtype=np.float64) / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    return g(t) / g(0.0)


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not s > 0.0:
        raise ValueError(f"offset s must be positive, got {s}")
    ab = cosine_alpha_bar(np.arange(T + 1), T, s)
    betas = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    return _from_betas(betas, COSINE, {"s": s, "max_beta": max_beta})


def make_schedule(kind: str, T: int, **params) -> NoiseSchedule:
    if kind == LINEAR:
        return linear_schedule(T, **params)
    if kind == COSINE:
        return cosine_schedule(T, **params)
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_at(sched: NoiseSchedule, t: int, with_beta: bool = True):
    """Return ``(beta_t, alpha_t, alpha_bar_t)``.

    At ``t = 0`` only ``alpha_bar`` exists; pass ``with_beta=False`` to get
    ``(None, None, 1.0)`` instead of an error.
    """
    if not 0 <= t <= sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T}]")
    if t == 0:
        if with_beta:
            raise IndexError("beta and alpha are undefined at timestep 0")
        return None, None, float(sched.alpha_bar[0])
    return float(sched.beta[t]), float(sched.alpha[t]), float(sched.alpha_bar[t])
