import math

import mpmath
import numpy as np
import pytest

from tamkot.data import chunk_dataset, generate_synthetic, shuffle_labels
from tamkot.errors import DegenerateTestError, UndefinedMetricError
from tamkot.evaluation import (CrossValResult, FoldMetrics, auc, average_ranks, cross_validate, evaluate,
                               paired_t_test, read_metrics_report, rmse, summarize, write_metrics_report)
from tamkot.model import Hyperparams
from tamkot.training import init_params


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def t_two_sided_p(t, df):
    """Two-sided tail of Student's t by numerically integrating its density."""
    df = mpmath.mpf(df)
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    tail = mpmath.quad(lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2), [abs(t), mpmath.inf])
    return float(2 * tail)


# --- AUC ------------------------------------------------------------------------

def test_auc_perfect():
    assert auc([0.9, 0.1], [1, 0]) == 1.0


def test_auc_all_ties():
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_reversed():
    assert auc([0.1, 0.9], [1, 0]) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_auc_brute_force(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(200), 2)  # rounding forces ties
    labels = rng.integers(0, 2, 200)
    assert abs(auc(scores, labels) - brute_auc(scores, labels)) < 1e-12


def test_auc_monotone_invariance():
    rng = np.random.default_rng(3)
    s = rng.normal(size=100)
    y = rng.integers(0, 2, 100)
    base = auc(s, y)
    assert auc(np.exp(s), y) == base
    assert auc(3 * s + 7, y) == base
    assert auc(np.arctan(s), y) == base


def test_auc_errors():
    with pytest.raises(UndefinedMetricError):
        auc([0.2, 0.3], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([0.2, 0.3], [0.5, 1])
    with pytest.raises(ValueError):
        auc([0.2], [1, 0])


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


# --- RMSE ------------------------------------------------------------------------

def test_rmse_examples():
    assert rmse([0.2, 0.7], [0.2, 0.7]) == 0.0
    assert rmse([1, 0], [0, 1]) == 1.0


def test_rmse_direct_and_properties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random(50), rng.random(50)
        direct = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / 50)
        assert abs(rmse(a, b) - direct) < 1e-12
        assert rmse(a, b) == rmse(b, a)
        assert rmse(a, b) <= 1.0


def test_rmse_errors():
    with pytest.raises(UndefinedMetricError):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 0.0])


# --- paired t ------------------------------------------------------------------------

def test_t_worked_example():
    # differences 1..5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5)/sqrt(5)) = 3*sqrt(2)
    t, p = paired_t_test([2, 4, 6, 8, 10], [1, 2, 3, 4, 5])
    assert abs(t - 4.242641) < 1e-3
    assert abs(p - 0.013236) < 1e-3
    assert abs(p - t_two_sided_p(3 * math.sqrt(2), 4)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_t_matches_integrated_density(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    a, b = rng.normal(size=n), rng.normal(size=n)
    t, p = paired_t_test(a, b)
    assert abs(p - t_two_sided_p(t, n - 1)) < 1e-9


def test_t_shift_is_significant():
    rng = np.random.default_rng(1)
    b = rng.random(5)
    t, p = paired_t_test(b + 0.1 + rng.normal(0, 1e-3, 5), b)
    assert t > 0 and p < 0.05


def test_t_degenerate():
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [1, 2, 3])
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [0, 1, 2])
    with pytest.raises(DegenerateTestError):
        paired_t_test([1], [0])


# --- cross-validation --------------------------------------------------------------

SYN = dict(n_students=60, n_problems=10, n_lectures=5, n_concepts=2, seed=0, min_length=20, max_length=30,
           loading_scale=2.0)
CV_HYPER = Hyperparams(d_q=4, d_l=4, d_r=4, d_h=6, seq_len=30, epochs=8, batch_size=16, learning_rate=0.02,
                       lambda_theta=0.0)


@pytest.fixture(scope="module")
def signal_cv():
    return cross_validate(generate_synthetic(SYN), CV_HYPER, k=5, seed=0)


def test_cv_detects_signal(signal_cv):
    mean, std = signal_cv.summary["auc"]
    assert len(signal_cv.values("auc")) == 5
    assert mean > 0.5 + 3 * std


def test_cv_never_scores_training_students(signal_cv):
    all_ids = set()
    for train_ids, scored in signal_cv.audit:
        assert not set(train_ids) & set(scored)
        all_ids |= set(scored)
    assert all_ids == set(generate_synthetic(SYN).student_ids)


def test_cv_fold_metrics_invariants(signal_cv):
    for f in signal_cv.folds:
        assert f.n_predictions >= 1
        assert 0 <= f.value <= 1


def test_cv_is_deterministic(signal_cv):
    again = cross_validate(generate_synthetic(SYN), CV_HYPER, k=5, seed=0)
    assert again.folds == signal_cv.folds


def test_cv_shuffled_labels_near_chance():
    res = cross_validate(shuffle_labels(generate_synthetic(SYN), seed=1), CV_HYPER, k=5, seed=0)
    assert abs(res.summary["auc"][0] - 0.5) < 0.05


def test_cold_start_exclusion_drops_one_prediction_per_chunk():
    ds = generate_synthetic(dict(SYN, n_students=5))
    hyper = Hyperparams(d_q=3, d_l=3, d_r=2, d_h=4, seq_len=7)
    params = init_params(hyper, ds.Q, ds.L)
    full = evaluate(params, ds)
    cold = evaluate(params, ds, exclude_cold_start=True)
    n_cold = sum(c.activities[0].assessed for c in chunk_dataset(ds, hyper.seq_len))
    assert full["n_predictions"] - cold["n_predictions"] == n_cold > 0


def test_evaluate_empty_split():
    ds = generate_synthetic(dict(SYN, n_students=3))
    params = init_params(Hyperparams(d_q=2, d_l=2, d_r=2, d_h=2, seq_len=5), ds.Q, ds.L)
    assert evaluate(params, ds, ["missing"])["n_predictions"] == 0


# --- report ---------------------------------------------------------------------------

def test_summary_uses_sample_std():
    folds = [FoldMetrics(i, "auc", v, 10) for i, v in enumerate([0.6, 0.7, 0.8])]
    mean, std = summarize(folds)["auc"]
    assert mean == pytest.approx(0.7) and std == pytest.approx(0.1)


def test_report_round_trip(tmp_path):
    folds = [FoldMetrics(i, m, v, 40 + i) for i in range(3) for m, v in (("auc", 0.6 + i / 30), ("rmse", 0.4 - i / 70))]
    res = CrossValResult(folds, summarize(folds))
    path = tmp_path / "metrics.csv"
    write_metrics_report(res, path)
    back = read_metrics_report(path)
    assert back.folds == res.folds
    assert back.summary == res.summary
    assert path.read_text().splitlines()[0] == "fold,metric,value,n_predictions"
