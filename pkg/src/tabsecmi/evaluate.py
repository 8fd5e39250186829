"""ROC/AUC, TPR at low FPR, t-error ratio curves and DCR scores."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import min_sq_dist
from .secmi import MEMBER, TErrorMatrix


@dataclass
class RocReport:
    """ROC sweep over distinct score thresholds.

    A row is called a member when its (oriented) score is at or beyond the
    threshold. ``points`` run from ``(0, 0)`` at an infinite threshold to
    ``(1, 1)`` at the weakest one.
    """

    points: list  # (fpr, tpr, threshold)
    auc: float
    n_pos: int
    n_neg: int
    higher_is_member: bool = True
    tpr_at: dict = field(default_factory=dict)

    @property
    def fpr(self):
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self):
        return np.array([p[1] for p in self.points])


def roc(scores, labels, higher_is_member: bool = True, fpr_targets=()) -> RocReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == MEMBER
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both members and non-members")
    oriented = scores if higher_is_member else -scores
    order = np.argsort(-oriented, kind="stable")
    s = oriented[order]
    p = pos[order].astype(np.int64)
    # last index of each group of equal scores
    ends = np.r_[np.nonzero(np.diff(s) != 0)[0], len(s) - 1]
    tp = np.cumsum(p)[ends]
    fp = (ends + 1) - tp
    sign = 1.0 if higher_is_member else -1.0
    points = [(0.0, 0.0, math.inf * sign)]
    points += [(fp[i] / n_neg, tp[i] / n_pos, float(sign * s[ends[i]])) for i in range(len(ends))]
    report = RocReport(points, 0.0, n_pos, n_neg, higher_is_member)
    # trapezoid area in integer counts, so a perfect split gives exactly 1.0
    fp0, tp0 = np.r_[0, fp], np.r_[0, tp]
    area = int(np.sum((fp0[1:] - fp0[:-1]) * (tp0[1:] + tp0[:-1])))
    report.auc = area / (2.0 * n_pos * n_neg)
    for target in fpr_targets:
        report.tpr_at[float(target)] = tpr_at_fpr(report, target)
    return report


def tpr_at_fpr(report: RocReport, fpr_target: float) -> float:
    """Best TPR among thresholds whose FPR does not exceed the target (no interpolation)."""
    if not 0.0 <= fpr_target <= 1.0:
        raise ValueError(f"fpr_target must lie in [0, 1], got {fpr_target}")
    max_fp = math.floor(fpr_target * report.n_neg + 1e-9)
    best = 0.0
    for fpr, tpr, _ in report.points:
        if round(fpr * report.n_neg) <= max_fp:
            best = max(best, tpr)
    return best


def pairwise_auc(scores, labels, higher_is_member: bool = True) -> float:
    """Probability a random member outranks a random non-member, ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    oriented = scores if higher_is_member else -scores
    a = oriented[labels == MEMBER][:, None]
    b = oriented[labels != MEMBER][None, :]
    return float(np.mean((a > b) + 0.5 * (a == b)))


# ---------------------------------------------------------------------------
# t-error ratios


@dataclass
class RatioReport:
    timesteps: list
    total_ratio: list
    columns: list
    column_ratios: list
    undefined: list = field(default_factory=list)  # (t, column or "total")


def _safe_ratio(num, den):
    if den > 0 and math.isfinite(num):
        return num / den
    return math.nan


def ratio_report(errors_by_t) -> RatioReport:
    """Mean non-member over mean member t-error, overall and per source column."""
    if not errors_by_t:
        raise ValueError("no error matrices given")
    columns = errors_by_t[0].source_columns
    report = RatioReport([], [], columns, [])
    for em in errors_by_t:
        pos = em.labels == MEMBER
        if not pos.any() or pos.all():
            raise ValueError(f"t={em.t}: both members and non-members required")
        totals = em.row_sums
        total = _safe_ratio(totals[~pos].mean(), totals[pos].mean())
        if math.isnan(total):
            report.undefined.append((em.t, "total"))
        cs = em.column_sums()
        cols = []
        for j, name in enumerate(columns):
            r = _safe_ratio(cs[~pos, j].mean(), cs[pos, j].mean())
            if math.isnan(r):
                report.undefined.append((em.t, name))
            cols.append(r)
        report.timesteps.append(em.t)
        report.total_ratio.append(total)
        report.column_ratios.append(cols)
    return report


# ---------------------------------------------------------------------------
# DCR


@dataclass
class DcrReport:
    dcr_score: float
    ties: int
    wins_member: int
    distances_member: np.ndarray
    distances_nonmember: np.ndarray
    subsample_seed: int | None = None
    reference_size: int = 0


def dcr(synthetic, member, nonmember_holdout, seed: int = 0) -> DcrReport:
    """Share of synthetic rows strictly closer to the member set, ties counting half.

    Distances are Euclidean in the shared encoded space. When the two real
    sets differ in size the larger one is subsampled (``seed``) to match.
    """
    syn, mem, non = (np.asarray(getattr(m, "values", m), dtype=np.float64)
                     for m in (synthetic, member, nonmember_holdout))
    for name, m in (("synthetic", syn), ("member", mem), ("non-member", non)):
        if m.ndim != 2 or len(m) == 0:
            raise ValueError(f"{name} set is empty")
    if not syn.shape[1] == mem.shape[1] == non.shape[1]:
        raise ValueError("all three sets must share the encoded width")
    used_seed = None
    if len(mem) != len(non):
        used_seed = seed
        rng = np.random.default_rng(seed)
        k = min(len(mem), len(non))
        if len(mem) > k:
            mem = mem[np.sort(rng.choice(len(mem), k, replace=False))]
        else:
            non = non[np.sort(rng.choice(len(non), k, replace=False))]
    dm = min_sq_dist(syn, mem)
    dn = min_sq_dist(syn, non)
    wins = int(np.sum(dm < dn))
    ties = int(np.sum(dm == dn))
    score = (wins + 0.5 * ties) / len(syn)
    return DcrReport(score, ties, wins, np.sqrt(dm), np.sqrt(dn), used_seed, len(mem))


# ---------------------------------------------------------------------------
# report files


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_roc_csv(path, report: RocReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for fpr, tpr, thr in report.points:
            w.writerow([_fmt(thr), _fmt(fpr), _fmt(tpr)])


def write_ratio_csv(path, report: RatioReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "total_ratio"] + list(report.columns))
        for t, total, cols in zip(report.timesteps, report.total_ratio, report.column_ratios):
            w.writerow([t, _fmt(total)] + [_fmt(c) for c in cols])


def roc_summary(report: RocReport):
    return {"auc": report.auc, "tpr_at": {repr(k): v for k, v in report.tpr_at.items()},
            "n_member": report.n_pos, "n_nonmember": report.n_neg}


def emit_reports(out_dir, metrics: dict, rocs: dict | None = None, ratio: RatioReport | None = None,
                 dcr_report: DcrReport | None = None):
    """Write ``metrics.json`` plus ``roc*.csv``, ``ratio.csv`` and ``dcr.json``.

    ``rocs`` maps an attack name to its :class:`RocReport`; ``roc.csv`` holds
    the learned attack's curve when present, else the first one given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = dict(metrics)
    written = []
    rocs = rocs or {}
    for name, rep in rocs.items():
        metrics.setdefault("attacks", {})[name] = roc_summary(rep)
        write_roc_csv(out / f"roc_{name}.csv", rep)
        written.append(f"roc_{name}.csv")
    if rocs:
        primary = "nn" if "nn" in rocs else next(iter(rocs))
        write_roc_csv(out / "roc.csv", rocs[primary])
        metrics["auc"] = rocs[primary].auc
        metrics["tpr_at"] = {repr(k): v for k, v in rocs[primary].tpr_at.items()}
        metrics["primary_attack"] = primary
        written.append("roc.csv")
    if ratio is not None:
        write_ratio_csv(out / "ratio.csv", ratio)
        metrics["ratio_undefined"] = [list(u) for u in ratio.undefined]
        written.append("ratio.csv")
    if dcr_report is not None:
        d = {"dcr_score": dcr_report.dcr_score, "ties": dcr_report.ties,
             "wins_member": dcr_report.wins_member, "n_synthetic": len(dcr_report.distances_member),
             "reference_size": dcr_report.reference_size, "subsample_seed": dcr_report.subsample_seed,
             "mean_distance_member": float(np.mean(dcr_report.distances_member)),
             "mean_distance_nonmember": float(np.mean(dcr_report.distances_nonmember))}
        write_json(out / "dcr.json", d)
        metrics["dcr_score"] = dcr_report.dcr_score
        written.append("dcr.json")
    write_json(out / "metrics.json", metrics)
    return ["metrics.json"] + written
