"""Acceptance criteria, one test each, printing one PASS/FAIL line per criterion.

Run just this module with ``pytest tests/test_acceptance.py -v -s``. Criteria
7 and 8 train several small diffusion models and take tens of minutes on
one CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from tabsecmi import cli
from tabsecmi.attacknet import nn_attack_train
from tabsecmi.dataset import apply_encode, fit_encode, make_synthetic_table, split_members
from tabsecmi.denoiser import TrainConfig, diffusion_loss, forward_step, init_denoiser, train
from tabsecmi.evaluate import dcr, pairwise_auc, roc, tpr_at_fpr
from tabsecmi.schedule import cosine_schedule, linear_schedule
from tabsecmi.secmi import TErrorMatrix, select_threshold, stat_attack, t_error, t_error_sweep

pytestmark = pytest.mark.acceptance

SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed=None):
        timing = f" [{elapsed:.1f}s]" if elapsed is not None else ""
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}{timing}")
        return ok
    return emit


# ---------------------------------------------------------------------------
# 1-6: exact properties against independent oracles


def test_c1_constant_predictor_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(10, 1001))
        sched = cosine_schedule(T) if rng.random() < 0.5 else linear_schedule(T)
        t = int(rng.integers(1, T))
        d = int(rng.integers(1, 9))
        x0 = rng.normal(size=(4, d))
        for eps in (np.zeros(d), rng.normal(size=d)):
            _, totals = t_error(lambda x, s, e=eps: e, x0, t, sched)
            worst = max(worst, float(np.max(np.abs(totals))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 1.0
    report(1, ok, f"max |t-error total| = {worst:.2e} (tol 1e-10)", elapsed)
    assert worst <= 1e-10
    assert elapsed < 1.0


def _fd_worst(model, loss_fn, step=1e-5):
    _, grads = loss_fn()
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_fn()[0]
            p[idx] = orig - step
            down = loss_fn()[0]
            p[idx] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-6))
    return worst


def test_c2_gradient_correctness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(20):
        d = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        T = int(rng.integers(5, 50))
        model = init_denoiser(d, hidden, int(rng.choice([2, 4, 6])), seed=k, T=T)
        sched = linear_schedule(T, 1e-3, 0.2)
        batch = rng.normal(size=(int(rng.integers(1, 6)), d))
        seed = int(rng.integers(1 << 30))
        worst = max(worst, _fd_worst(model, lambda: diffusion_loss(model, batch, sched, np.random.default_rng(seed))))
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-4 and elapsed < 30, f"worst relative gradient error {worst:.2e} (tol 1e-4)", elapsed)
    assert worst < 1e-4
    assert elapsed < 30


def test_c3_forward_marginal_consistency(report):
    start = time.perf_counter()
    sched = linear_schedule(1000)
    worst_mean = worst_var = 0.0
    for t in (10, 100):
        rng = np.random.default_rng(t)
        x0 = np.linspace(1.0, 2.0, 16)
        x = np.broadcast_to(x0, (10_000, 16)).copy()
        for k in range(1, t + 1):
            x = forward_step(x, k, rng.standard_normal(x.shape), sched)
        ab = sched.alpha_bar[t]
        worst_mean = max(worst_mean, float(np.max(np.abs(x.mean(axis=0) / (np.sqrt(ab) * x0) - 1))))
        pooled_var = np.mean((x - x.mean(axis=0)) ** 2)
        worst_var = max(worst_var, abs(pooled_var / (1 - ab) - 1))
    elapsed = time.perf_counter() - start
    ok = worst_mean < 0.02 and worst_var < 0.02 and elapsed < 30
    report(3, ok, f"mean rel err {worst_mean:.4f}, variance rel err {worst_var:.4f} (tol 0.02)", elapsed)
    assert worst_mean < 0.02 and worst_var < 0.02
    assert elapsed < 30


def _score_sets(seed):
    rng = np.random.default_rng(seed)
    for k in range(50):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 10, size=n).astype(float) if k % 2 == 0 else rng.normal(size=n)
        yield scores, labels


def test_c4_auc_oracle_equivalence(report):
    start = time.perf_counter()
    worst = max(abs(roc(s, y).auc - pairwise_auc(s, y)) for s, y in _score_sets(4))
    elapsed = time.perf_counter() - start
    report(4, worst < 1e-9 and elapsed < 5, f"max |AUC - pairwise| = {worst:.1e} (tol 1e-9)", elapsed)
    assert worst < 1e-9
    assert elapsed < 5


def _exhaustive_tpr(scores, labels, target):
    n_neg = int(np.sum(labels == 0))
    best = 0.0
    for thr in list(np.unique(scores)) + [np.inf]:
        pred = scores >= thr
        if np.sum(pred & (labels == 0)) <= math.floor(target * n_neg + 1e-9):
            best = max(best, float(np.mean(pred[labels == 1])))
    return best


def test_c5_tpr_oracle_equivalence(report):
    start = time.perf_counter()
    mismatches = 0
    for s, y in _score_sets(5):
        rep = roc(s, y)
        for target in (0.001, 0.01, 0.1, 0.3):
            mismatches += tpr_at_fpr(rep, target) != _exhaustive_tpr(s, y, target)
    elapsed = time.perf_counter() - start
    report(5, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches over 200 comparisons", elapsed)
    assert mismatches == 0
    assert elapsed < 5


def test_c6_dcr_fixed_points(report):
    rng = np.random.default_rng(6)
    mem = rng.normal(size=(50, 8))
    non = rng.normal(size=(50, 8)) + 0.5
    copies = dcr(mem[:30].copy(), mem, non).dcr_score
    # mirror image: every synthetic row sits on a member or its reflected non-member twin
    sym_mem = rng.normal(size=(20, 8)) + 4.0
    sym_non = -sym_mem
    syn = np.vstack([sym_mem[:10], sym_non[:10], np.zeros((5, 8))])
    symmetric = dcr(syn, sym_mem, sym_non).dcr_score
    ok = copies == 1.0 and symmetric == 0.5
    report(6, ok, f"member copies -> {copies}, symmetric -> {symmetric}")
    assert copies == 1.0
    assert symmetric == 0.5


# ---------------------------------------------------------------------------
# 7-8: desk-scale attacks on an overfit target

DESK = {
    "T": 200,
    "hidden": (128, 128, 128),
    "train": dict(batch_size=64, learning_rate=2e-3),
    "attack": dict(batch_size=64, epochs=10, learning_rate=1e-3),
    "train_fraction": 0.2,
}


def desk_trial(seed, n_members, epochs, timesteps=(50,)):
    """Train a target on ``n_members`` synthetic rows and attack it.

    Non-members are an equally sized disjoint draw from the same table.
    Returns the per-timestep residual matrices and the NN AUC at t = 50.
    """
    table = make_synthetic_table(2 * n_members, seed)
    split = split_members(table, 0.5, seed)
    members = fit_encode(table.take(split.member_indices), include_categorical=True)
    nonmembers = apply_encode(members.transform, table.take(split.nonmember_indices))
    sched = cosine_schedule(DESK["T"])
    model = init_denoiser(members.transform.dim, DESK["hidden"], 16, seed, sched.T)
    model, _ = train(model, members, sched, TrainConfig(epochs=epochs, seed=seed, **DESK["train"]))
    x = np.vstack([members.values, nonmembers.values])
    labels = np.r_[np.ones(len(members.values), int), np.zeros(len(nonmembers.values), int)]
    with np.errstate(over="ignore", invalid="ignore"):
        sweep = t_error_sweep(model, x, sorted(set(timesteps) | {50}), sched)
    matrix = TErrorMatrix(50, sweep[50], labels, members.column_map)
    _, res = nn_attack_train(matrix, DESK["train_fraction"], TrainConfig(seed=seed, **DESK["attack"]))
    return sweep, labels, roc(res.heldout_scores, res.heldout_labels).auc


def test_c7_desk_scale_reproduction(report):
    start = time.perf_counter()
    window = range(20, 81)
    passes, lines = 0, []
    for seed in SEEDS:
        sweep, labels, nn_auc = desk_trial(seed, 256, epochs=20_000, timesteps=window)
        with np.errstate(over="ignore", invalid="ignore"):
            ratios = [sweep[t][labels == 0].sum(1).mean() / sweep[t][labels == 1].sum(1).mean() for t in window]
        mean_ratio = float(np.mean(ratios))
        ok = mean_ratio > 1.05 and nn_auc >= 0.7
        passes += ok
        lines.append(f"seed {seed}: ratio {mean_ratio:.3g}, NN AUC {nn_auc:.3f}")
    elapsed = time.perf_counter() - start
    report(7, passes >= 4, f"{passes}/5 seeds pass ({'; '.join(lines)})", elapsed)
    assert passes >= 4


def test_c8_training_size_effect(report):
    start = time.perf_counter()
    passes, lines = 0, []
    for seed in SEEDS:
        aucs = [desk_trial(seed, n, epochs=2_500)[2] for n in (256, 1024, 4096)]
        ok = all(aucs[i + 1] <= aucs[i] + 0.03 for i in range(2))
        passes += ok
        lines.append(f"seed {seed}: " + "/".join(f"{a:.3f}" for a in aucs))
    elapsed = time.perf_counter() - start
    report(8, passes >= 4, f"{passes}/5 seeds non-increasing (AUC at 256/1024/4096: {'; '.join(lines)})", elapsed)
    assert passes >= 4


# ---------------------------------------------------------------------------
# 9-10


def gap_matrix(n=500, seed=9):
    """Column 3 separates the classes; seven wide uniform columns swamp row sums."""
    rng = np.random.default_rng(seed)
    labels = np.r_[np.ones(n, int), np.zeros(n, int)]
    errors = rng.uniform(0.0, 10.0, size=(2 * n, 8))
    errors[:, 3] = np.where(labels == 1, rng.uniform(0.0, 0.5, 2 * n), rng.uniform(0.6, 1.1, 2 * n))
    return TErrorMatrix(50, errors, labels)


def test_c9_stat_vs_nn_gap(report):
    start = time.perf_counter()
    matrix = gap_matrix()
    stat = stat_attack(matrix, 0.2, seed=0)
    held = stat.heldout_indices
    stat_auc = roc(matrix.row_sums[held], matrix.labels[held], higher_is_member=False).auc
    oracle_auc = pairwise_auc(matrix.row_sums[held], matrix.labels[held], higher_is_member=False)
    # calibrated threshold against an exhaustive sweep of every midpoint
    cal_scores, cal_labels = stat.scores[stat.calibration_indices], matrix.labels[stat.calibration_indices]
    s = np.unique(cal_scores)
    pos, neg = cal_labels == 1, cal_labels == 0
    # balanced accuracy scaled by n_pos * n_neg stays an exact integer
    sweep = [(int(np.sum(cal_scores[pos] < m)) * int(neg.sum()) + int(np.sum(cal_scores[neg] >= m)) * int(pos.sum()), m)
             for m in (s[:-1] + s[1:]) / 2]
    best = max(b for b, _ in sweep)
    oracle_thr = min(m for b, m in sweep if b == best)
    _, res = nn_attack_train(matrix, 0.2, TrainConfig(batch_size=64, epochs=200, learning_rate=1e-3, seed=0))
    nn_auc = roc(res.heldout_scores, res.heldout_labels).auc
    elapsed = time.perf_counter() - start
    ok = nn_auc >= 0.95 and stat_auc <= 0.7 and stat.threshold == oracle_thr and elapsed < 60
    report(9, ok, f"NN AUC {nn_auc:.3f} (>= 0.95), stat AUC {stat_auc:.3f} (<= 0.7), "
                  f"threshold {stat.threshold:.4f} vs oracle {oracle_thr:.4f}", elapsed)
    assert abs(stat_auc - oracle_auc) < 1e-12
    assert select_threshold(cal_scores, cal_labels)[0] == oracle_thr == stat.threshold
    assert nn_auc >= 0.95 and stat_auc <= 0.7
    assert elapsed < 60


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_c10_end_to_end_determinism(report, tmp_path):
    start = time.perf_counter()
    table, schema = cli.cmd_make_table(tmp_path / "data", 400, seed=10)
    config = tmp_path / "config.json"
    config.write_text(
        '{"data": "data/table.csv", "schema": "data/schema.json", "seed": 10,'
        ' "schedule": {"kind": "cosine", "T": 100},'
        ' "denoiser": {"hidden": [64, 64], "train": {"epochs": 200}},'
        ' "attack": {"t": 50, "kind": "both", "train": {"epochs": 20}},'
        ' "ratio_timesteps": {"start": 20, "stop": 300, "step": 10}, "n_samples": 200}\n')
    codes = [cli.main(["all", "--config", str(config), "--run-dir", str(tmp_path / name)]) for name in ("a", "b")]
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and not differing and len(a) > 20
    report(10, ok, f"exit codes {codes}, {len(a)} files, {len(differing)} differ", elapsed)
    assert codes == [0, 0]
    assert not differing
    assert {"metrics.json", "roc.csv", "ratio.csv", "dcr.json"} <= set(a)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-s"]))
