"""Step-wise error comparison: t-errors and the threshold attack.

``model`` below is any callable ``model(x_t, t) -> eps_hat`` taking a batch
``(n, d)`` and an integer timestep; :class:`~tabsecmi.denoiser.Denoiser`
qualifies, as does any stub used in tests.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schedule import NoiseSchedule

MEMBER = 1
NONMEMBER = 0


def _check_t(t, lo, hi, what):
    if not lo <= t <= hi:
        raise IndexError(f"{what}: timestep {t} outside [{lo}, {hi}]")


def _predict(model, x, t):
    eps = model(x, t)
    if not isinstance(eps, np.ndarray) or eps.dtype != np.float64:
        eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape and eps.shape != x.shape[1:]:
        eps = np.broadcast_to(eps, x.shape)  # a per-dimension vector broadcasts on its own
    return eps


def _roots(sched, t):
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def _f_from_eps(x, eps, t, sched):
    a, s = _roots(sched, t)
    return (x - s * eps) / a


def f_theta(model, xt, t: int, sched: NoiseSchedule):
    """Clean-data estimate ``(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)``."""
    _check_t(t, 0, sched.T, "f_theta")
    xt = np.asarray(xt, dtype=np.float64)
    return _f_from_eps(xt, _predict(model, xt, t), t, sched)


def _move(model, x, t, t_new, sched):
    eps = _predict(model, x, t)
    f = _f_from_eps(x, eps, t, sched)
    a, s = _roots(sched, t_new)
    return a * f + s * eps


def phi_step(model, xt, t: int, sched: NoiseSchedule):
    """Deterministic diffusion step from timestep ``t`` to ``t + 1``."""
    _check_t(t, 0, sched.T - 1, "phi_step")
    return _move(model, np.asarray(xt, dtype=np.float64), t, t + 1, sched)


def psi_step(model, xt, t: int, sched: NoiseSchedule):
    """Deterministic denoising step from timestep ``t`` to ``t - 1``."""
    _check_t(t, 1, sched.T, "psi_step")
    return _move(model, np.asarray(xt, dtype=np.float64), t, t - 1, sched)


def _walk(model, x, t_from, t_to, sched):
    """Repeated ``phi_step`` from ``t_from`` to ``t_to`` with the roots tabulated once."""
    ab = sched.alpha_bar[t_from:t_to + 1]
    a = np.sqrt(ab).tolist()
    r = np.sqrt(1.0 - ab).tolist()
    for k in range(t_to - t_from):
        eps = _predict(model, x, t_from + k)
        x = a[k + 1] * ((x - r[k] * eps) / a[k]) + r[k + 1] * eps
    return x


def deterministic_diffuse(model, x0, t_target: int, sched: NoiseSchedule):
    """Walk ``x0`` up to ``t_target`` one ``phi_step`` at a time."""
    _check_t(t_target, 0, sched.T - 1, "deterministic_diffuse")
    return _walk(model, np.asarray(x0, dtype=np.float64), 0, t_target, sched)


def _round_trip_residual(model, x_t, t, sched, literal):
    x_up = phi_step(model, x_t, t, sched)
    back = psi_step(model, x_up, t if literal else t + 1, sched)
    if not np.all(np.isfinite(back)):
        raise FloatingPointError(f"non-finite t-error intermediate at timestep {t}")
    return (back - x_t) ** 2


def t_error(model, x0, t: int, sched: NoiseSchedule, literal: bool = False):
    """Per-dimension squared residual of the diffuse-then-denoise round trip.

    With ``literal=False`` the round trip is ``psi(phi(x_t, t), t + 1)``, which
    lands back on timestep ``t``. ``literal=True`` evaluates ``psi`` at ``t``
    instead, comparing a timestep ``t - 1`` state against ``x_t``.
    Returns ``(residuals, totals)``; totals are row sums.
    """
    _check_t(t, 1, sched.T - 1, "t_error")
    x_t = deterministic_diffuse(model, x0, t, sched)
    resid = _round_trip_residual(model, x_t, t, sched, literal)
    return resid, resid.sum(axis=-1)


def t_error_sweep(model, x0, timesteps, sched: NoiseSchedule, literal: bool = False):
    """Residuals at several timesteps sharing one deterministic walk.

    Returns a dict ``{t: residual matrix}``; identical to calling
    :func:`t_error` per timestep.
    """
    ts = sorted(set(int(t) for t in timesteps))
    if not ts:
        return {}
    for t in ts:
        _check_t(t, 1, sched.T - 1, "t_error_sweep")
    x = np.asarray(x0, dtype=np.float64)
    out = {}
    s = 0
    for t in ts:
        x = _walk(model, x, s, t, sched)
        s = t
        out[t] = _round_trip_residual(model, x, t, sched, literal)
    return out


# ---------------------------------------------------------------------------
# error matrices


def _source_columns(column_map):
    seen = []
    for c in column_map:
        if c not in seen:
            seen.append(c)
    return seen


@dataclass
class TErrorMatrix:
    t: int
    errors: np.ndarray
    labels: np.ndarray
    column_map: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.errors.ndim != 2:
            raise ValueError("errors must be a 2-D matrix")
        if len(self.labels) != len(self.errors):
            raise ValueError("one label per row required")
        if not self.column_map:
            self.column_map = [f"dim_{j}" for j in range(self.errors.shape[1])]
        if len(self.column_map) != self.errors.shape[1]:
            raise ValueError("column_map length must equal the error width")

    @property
    def row_sums(self):
        return self.errors.sum(axis=1)

    @property
    def source_columns(self):
        return _source_columns(self.column_map)

    def column_sums(self):
        """Residuals summed within each source column (one-hot blocks collapse)."""
        cols = self.source_columns
        out = np.zeros((len(self.errors), len(cols)))
        for j, name in enumerate(self.column_map):
            out[:, cols.index(name)] += self.errors[:, j]
        return out

    def save(self, path, extra_meta=None):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "label"] + [f"e{j}" for j in range(self.errors.shape[1])])
            for i, (lab, row) in enumerate(zip(self.labels, self.errors)):
                w.writerow([i, "member" if lab == MEMBER else "nonmember"] + [repr(float(v)) for v in row])
        side = {"t": self.t, "column_map": list(self.column_map), **self.meta, **(extra_meta or {})}
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        labels, rows = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec in reader:
                labels.append(MEMBER if rec[1] == "member" else NONMEMBER)
                rows.append([float(v) for v in rec[2:]])
        meta = {k: v for k, v in side.items() if k not in ("t", "column_map")}
        width = len(side["column_map"])
        return cls(side["t"], np.array(rows).reshape(len(rows), width), np.array(labels),
                   side["column_map"], meta)


def t_error_matrix(model, data, labels, t: int, sched: NoiseSchedule, literal=False) -> TErrorMatrix:
    values = np.asarray(getattr(data, "values", data), dtype=np.float64)
    column_map = list(getattr(data, "column_map", []) or [])
    width = getattr(model, "d", values.shape[1])
    if values.shape[1] != width:
        raise ValueError(f"data width {values.shape[1]} != model width {width}")
    resid, _ = t_error(model, values, t, sched, literal)
    return TErrorMatrix(t, resid, labels, column_map)


def t_error_matrices(model, data, labels, timesteps, sched: NoiseSchedule, literal=False):
    values = np.asarray(getattr(data, "values", data), dtype=np.float64)
    column_map = list(getattr(data, "column_map", []) or [])
    sweep = t_error_sweep(model, values, timesteps, sched, literal)
    return [TErrorMatrix(t, sweep[t], labels, column_map) for t in sorted(sweep)]


# ---------------------------------------------------------------------------
# threshold attack


def balanced_accuracy(scores, labels, threshold):
    """Members are predicted where ``score < threshold``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pred = scores < threshold
    pos = labels == MEMBER
    return 0.5 * (pred[pos].mean() + (~pred[~pos]).mean())


def select_threshold(scores, labels):
    """Midpoint between consecutive distinct scores maximising balanced accuracy.

    Ties between candidates go to the smallest threshold. With a single
    distinct score the threshold is that score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == MEMBER))
    n_neg = int(np.sum(labels != MEMBER))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("threshold calibration needs both members and non-members")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    is_pos = (labels[order] == MEMBER).astype(np.int64)
    # boundary k separates s[:k] (predicted member) from s[k:]
    bounds = np.nonzero(np.diff(s) > 0)[0] + 1
    if len(bounds) == 0:
        return float(s[0]), 0.5
    tp = np.cumsum(is_pos)[bounds - 1]
    fp = bounds - tp
    bacc = 0.5 * (tp / n_pos + (n_neg - fp) / n_neg)
    best = int(np.argmax(bacc))
    k = bounds[best]
    return float(0.5 * (s[k - 1] + s[k])), float(bacc[best])


def predict_members(scores, threshold):
    """Strictly-below rule: a score equal to the threshold is a non-member."""
    return np.where(np.asarray(scores) < threshold, MEMBER, NONMEMBER)


@dataclass
class StatAttackResult:
    threshold: float
    scores: np.ndarray
    predictions: np.ndarray
    calibration_indices: np.ndarray
    heldout_indices: np.ndarray
    calibration_meta: dict

    @property
    def heldout_scores(self):
        return self.scores[self.heldout_indices]


def calibration_split(n, fraction, seed):
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"calibration fraction must lie in (0, 1], got {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(fraction * n)))
    return np.sort(perm[:k]), np.sort(perm[k:])


def stat_attack(errors: TErrorMatrix, calibration_fraction: float = 0.2, seed: int = 0) -> StatAttackResult:
    """Row-summed t-error below a calibrated threshold means member."""
    scores = errors.row_sums
    cal, held = calibration_split(len(scores), calibration_fraction, seed)
    threshold, bacc = select_threshold(scores[cal], errors.labels[cal])
    preds = predict_members(scores, threshold)
    meta = {"seed": seed, "calibration_fraction": calibration_fraction,
            "method": "max-balanced-accuracy-midpoint", "calibration_balanced_accuracy": bacc}
    return StatAttackResult(threshold, scores, preds, cal, held, meta)
