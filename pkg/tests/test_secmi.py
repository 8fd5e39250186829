import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ConstantPredictor, LinearPredictor
from tabsecmi.denoiser import init_denoiser
from tabsecmi.schedule import cosine_schedule, linear_schedule
from tabsecmi.secmi import (
    MEMBER, NONMEMBER, TErrorMatrix, balanced_accuracy, deterministic_diffuse, f_theta, phi_step,
    predict_members, psi_step, select_threshold, stat_attack, t_error, t_error_matrices, t_error_matrix, t_error_sweep,
)


def test_f_inverts_exact_noise():
    s = linear_schedule(100)
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    t = 37
    xt = np.sqrt(s.alpha_bar[t]) * x0 + np.sqrt(1 - s.alpha_bar[t]) * eps
    oracle = lambda x, tt: eps
    np.testing.assert_allclose(f_theta(oracle, xt, t, s), x0, rtol=0, atol=1e-12)


def test_f_zero_predictor_and_arithmetic():
    s = linear_schedule(10)
    x = np.array([[0.3, -1.0]])
    np.testing.assert_allclose(f_theta(ConstantPredictor(0.0, 2), x, 4, s), x / np.sqrt(s.alpha_bar[4]))
    quarter = linear_schedule(2, 0.5, 0.5)  # alpha_bar = (1, 0.5, 0.25)
    assert quarter.alpha_bar[2] == 0.25
    out = f_theta(ConstantPredictor(0.5, 1), np.array([[1.0]]), 2, quarter)
    assert abs(out[0, 0] - (1 - math.sqrt(0.75) * 0.5) / 0.5) < 1e-15
    assert abs(out[0, 0] - 1.133975) < 1e-6


def test_phi_zero_predictor():
    s = cosine_schedule(50)
    x = np.array([[1.0, 2.0]])
    np.testing.assert_allclose(phi_step(ConstantPredictor(0.0, 2), x, 7, s),
                               np.sqrt(s.alpha_bar[8] / s.alpha_bar[7]) * x, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 48), st.floats(-3, 3), st.floats(-2, 2))
def test_constant_round_trip(t, c, x):
    s = cosine_schedule(50)
    m = ConstantPredictor(c, 1)
    xt = np.array([[x]])
    back = psi_step(m, phi_step(m, xt, t, s), t + 1, s)
    assert abs(back[0, 0] - x) < 1e-12


def test_psi_at_one_is_clean_estimate():
    s = linear_schedule(20)
    m = LinearPredictor(0.2, 2)
    x = np.array([[0.4, -0.7]])
    np.testing.assert_allclose(psi_step(m, x, 1, s), f_theta(m, x, 1, s), rtol=1e-15)


def test_step_boundaries():
    s = linear_schedule(10)
    m = ConstantPredictor(0.0, 1)
    x = np.zeros((1, 1))
    with pytest.raises(IndexError):
        phi_step(m, x, 10, s)
    with pytest.raises(IndexError):
        psi_step(m, x, 0, s)
    with pytest.raises(IndexError):
        deterministic_diffuse(m, x, 10, s)
    for bad in (0, 10):
        with pytest.raises(IndexError):
            t_error(m, x, bad, s)


def test_deterministic_diffuse_zero_predictor_telescopes():
    s = linear_schedule(200)
    x0 = np.array([[1.5, -0.5, 2.0]])
    m = ConstantPredictor(0.0, 3)
    assert np.array_equal(deterministic_diffuse(m, x0, 0, s), x0)
    for t in (1, 17, 150):
        np.testing.assert_allclose(deterministic_diffuse(m, x0, t, s), np.sqrt(s.alpha_bar[t]) * x0,
                                   rtol=1e-12)


def test_deterministic_diffuse_is_repeatable():
    s = cosine_schedule(100)
    m = init_denoiser(3, (8,), 4, seed=0, T=100)
    x0 = np.random.default_rng(0).normal(size=(4, 3))
    assert deterministic_diffuse(m, x0, 30, s).tobytes() == deterministic_diffuse(m, x0, 30, s).tobytes()


@pytest.mark.parametrize("value", [0.0, 0.7, -1.3])
def test_constant_predictor_t_error_zero(value):
    s = cosine_schedule(100)
    x0 = np.random.default_rng(3).normal(size=(6, 4))
    for t in (1, 10, 50, 99):
        resid, total = t_error(ConstantPredictor(value, 4), x0, t, s)
        assert np.all(resid >= 0)
        assert np.all(total < 1e-12)


def _linear_oracle(k, t, alpha_bar, x0=1.0):
    """Closed form for eps(x) = k x: every step multiplies the state by a scalar."""
    def gain(t_from, t_to):
        a, b = alpha_bar[t_from], alpha_bar[t_to]
        return math.sqrt(b) * (1 - math.sqrt(1 - a) * k) / math.sqrt(a) + math.sqrt(1 - b) * k
    x = x0
    for step in range(t):
        x *= gain(step, step + 1)
    back = x * gain(t, t + 1) * gain(t + 1, t)
    return (back - x) ** 2


@pytest.mark.parametrize("t", [1, 2, 3])
def test_linear_stub_matches_hand_oracle(t):
    betas = [0.1, 0.2, 0.3, 0.4]
    ab = [1.0]
    for b in betas:
        ab.append(ab[-1] * (1 - b))
    s = linear_schedule(4, 0.1, 0.4)
    _, total = t_error(LinearPredictor(0.1), np.array([[1.0]]), t, s)
    expected = _linear_oracle(0.1, t, ab)
    assert expected > 1e-6
    assert abs(total[0] - expected) < 1e-10


def test_literal_reading_differs():
    s = linear_schedule(4, 0.1, 0.4)
    lit, _ = t_error(ConstantPredictor(0.0, 1), np.array([[1.0]]), 2, s, literal=True)
    assert lit[0, 0] > 0


def test_sweep_equals_individual_calls():
    s = cosine_schedule(100)
    m = init_denoiser(3, (8,), 4, seed=1, T=100)
    x0 = np.random.default_rng(1).normal(size=(5, 3))
    sweep = t_error_sweep(m, x0, [30, 5, 12], s)
    for t, resid in sweep.items():
        assert np.array_equal(resid, t_error(m, x0, t, s)[0])


def test_matrix_shapes_and_aggregation():
    s = linear_schedule(30)
    m = init_denoiser(4, (8,), 4, seed=0, T=30)
    x = np.random.default_rng(0).normal(size=(1, 4))

    class Enc:
        values = x
        column_map = ["a", "b", "b", "c"]

    em = t_error_matrix(m, Enc, [MEMBER], 5, s)
    assert em.errors.shape == (1, 4)
    np.testing.assert_allclose(em.row_sums, t_error(m, x, 5, s)[1], rtol=1e-12)
    cs = em.column_sums()
    assert em.source_columns == ["a", "b", "c"]
    assert cs[0, 1] == em.errors[0, 1] + em.errors[0, 2]
    zero = t_error_matrix(ConstantPredictor(0.0, 4), x, [MEMBER], 5, s)
    assert np.all(zero.errors == 0)
    with pytest.raises(ValueError):
        t_error_matrix(m, np.zeros((2, 3)), [1, 0], 5, s)


def test_matrix_csv_roundtrip(tmp_path):
    em = TErrorMatrix(50, np.random.default_rng(0).random((4, 3)), [1, 0, 1, 0], ["x", "y", "y"],
                      {"checkpoint": "abc"})
    em.save(tmp_path / "te.csv")
    back = TErrorMatrix.load(tmp_path / "te.csv")
    assert back.t == 50 and back.column_map == ["x", "y", "y"]
    assert np.array_equal(back.errors, em.errors) and np.array_equal(back.labels, em.labels)
    assert back.meta["checkpoint"] == "abc"


def test_multi_matrices():
    s = linear_schedule(30)
    m = init_denoiser(2, (4,), 2, seed=0, T=30)
    out = t_error_matrices(m, np.zeros((3, 2)), [1, 0, 1], [10, 3], s)
    assert [e.t for e in out] == [3, 10]


# ---------------------------------------------------------------------------
# threshold attack


def _sweep_oracle(scores, labels):
    vals = np.unique(scores)
    best = -1.0
    for a, b in zip(vals[:-1], vals[1:]):
        best = max(best, balanced_accuracy(scores, labels, 0.5 * (a + b)))
    return best


def test_threshold_midpoint_example():
    scores = np.array([1.0, 2.0, 10.0, 20.0])
    labels = np.array([MEMBER, MEMBER, NONMEMBER, NONMEMBER])
    thr, bacc = select_threshold(scores, labels)
    assert thr == 6.0 and bacc == 1.0
    for cand in (2.5, 6.0, 9.9):
        assert balanced_accuracy(scores, labels, cand) == 1.0


def test_identical_classes_half_accuracy():
    scores = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    labels = np.array([1, 1, 1, 0, 0, 0])
    for thr in (1.5, 2.5, 0.0, 4.0):
        assert balanced_accuracy(scores, labels, thr) == 0.5
    assert select_threshold(scores, labels)[1] == 0.5


def test_single_class_calibration_rejected():
    with pytest.raises(ValueError):
        select_threshold(np.array([1.0, 2.0]), np.array([MEMBER, MEMBER]))


def test_strictly_below_rule():
    em = TErrorMatrix(1, np.array([[1.0], [2.0], [10.0], [20.0]]), [1, 1, 0, 0])
    res = stat_attack(em, 1.0, seed=0)
    assert res.threshold == 6.0
    assert res.predictions.tolist() == [1, 1, 0, 0]
    assert predict_members([5.999, 6.0, 6.001], 6.0).tolist() == [MEMBER, NONMEMBER, NONMEMBER]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 500), st.booleans())
def test_threshold_is_optimal(seed, n, ties):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.normal(size=n) + 0.5 * labels
    if ties:
        scores = np.round(scores, 1)
    thr, bacc = select_threshold(scores, labels)
    assert abs(balanced_accuracy(scores, labels, thr) - bacc) < 1e-12
    if len(np.unique(scores)) > 1:
        assert bacc >= _sweep_oracle(scores, labels) - 1e-12


def test_stat_attack_split_and_determinism():
    rng = np.random.default_rng(0)
    em = TErrorMatrix(5, rng.random((100, 3)), np.r_[np.ones(50), np.zeros(50)])
    a = stat_attack(em, 0.2, seed=3)
    b = stat_attack(em, 0.2, seed=3)
    assert a.threshold == b.threshold
    assert len(a.calibration_indices) == 20 and len(a.heldout_indices) == 80
    assert not set(a.calibration_indices) & set(a.heldout_indices)
    assert len(a.scores) == 100
