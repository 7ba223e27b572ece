import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmmd.diagnostics import (
    CollapseConfig, average_precision, collapse_curve, collapse_fraction, collapse_report, error_rate,
    evaluate, mean_average_precision, per_dim_kl_matrix, predict_labels, rmse, variance_collapse,
)
from cmmd.distributions import gaussian_kl
from cmmd.model import tie_encoder_to_prior
from conftest import random_batch, small_model


def count_oracle(matrix, eps, delta):
    n, d = matrix.shape
    hits = 0
    for i in range(d):
        below = sum(1 for r in range(n) if matrix[r, i] < eps)
        hits += below >= (1 - delta) * n
    return hits / d


def constructed():
    m = np.full((100, 2), 0.1)
    m[:2, 1] = 10.0
    return m


def test_constructed_example():
    assert collapse_fraction(constructed(), 0.5, 0.01) == 0.5
    assert collapse_fraction(constructed(), 0.5, 0.05) == 1.0


def test_all_zero_matrix():
    assert collapse_fraction(np.zeros((5, 4)), 1e-9) == 1.0
    assert collapse_fraction(np.zeros((5, 4)), 0.0) == 0.0


def test_counting_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mat = rng.exponential(1.0, size=(rng.integers(1, 40), rng.integers(1, 6)))
        eps, delta = float(rng.uniform(0, 3)), float(rng.uniform(0.001, 0.5))
        assert collapse_fraction(mat, eps, delta) == count_oracle(mat, eps, delta)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 5)), elements=st.floats(0, 5)),
       st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_monotone_properties(mat, d1, d2):
    curve = collapse_curve(mat, np.linspace(0, 6, 61))
    assert np.all(np.diff(curve) >= 0)
    lo, hi = sorted((d1, d2))
    for eps in (0.5, 2.0):
        assert collapse_fraction(mat, eps, hi) >= collapse_fraction(mat, eps, lo)
    assert collapse_fraction(mat, 1e9) == 1.0


def test_variance_collapse_fixed_variance_step():
    var = np.full((50, 6), 0.01)
    eps = np.array([0.0, 0.005, 0.01, 0.0100001, 0.02])
    assert variance_collapse(var, eps).tolist() == [0.0, 0.0, 0.0, 1.0, 1.0]


def test_variance_collapse_two_regimes():
    rng = np.random.default_rng(1)
    var = np.concatenate([rng.uniform(0.001, 0.05, (80, 3)), rng.uniform(0.5, 2.0, (80, 2))], axis=1)
    eps = np.linspace(0, 3, 31)
    assert variance_collapse(var, eps).tolist() == [count_oracle(var, e, 0.01) for e in eps]
    with pytest.raises(ValueError):
        variance_collapse(np.zeros((2, 2)), eps)


def test_config_validation():
    with pytest.raises(ValueError):
        CollapseConfig(delta=0.0)
    with pytest.raises(ValueError):
        CollapseConfig(epsilons=(0.5, 0.1))
    with pytest.raises(ValueError):
        CollapseConfig(pairings=("bogus",))
    assert len(CollapseConfig().epsilons) == 61


def test_kl_matrix_tied_encoder_is_zero():
    m = small_model(dropout=0.0)
    tie_encoder_to_prior(m)
    b = random_batch(m, rows=10)
    assert np.all(per_dim_kl_matrix(m, b, "q_vs_prior") == 0.0)


def test_kl_matrix_matches_gaussian_kl_and_scalar_formula(model):
    b = random_batch(model, rows=10)
    mat = per_dim_kl_matrix(model, b, "q_vs_prior")
    q = model.encode({"x1": b.x["x1"]}, {"x2": b.x["x2"]}, b.y)
    p = model.prior({"x1": b.x["x1"]})
    assert np.array_equal(mat, gaussian_kl(q, p)[0].values)
    for n, i in itertools.product(range(10), range(3)):
        mq, lq = q.mean.values[n, i], q.log_var.values[n, i]
        mp, lp = p.mean.values[n, i], p.log_var.values[n, i]
        kl = 0.5 * (math.exp(lq - lp) + (mq - mp) ** 2 / math.exp(lp) - 1 + lp - lq)
        assert mat[n, i] == pytest.approx(kl, abs=1e-12)


def test_prior_vs_std_formula(model):
    b = random_batch(model, rows=5)
    mat = per_dim_kl_matrix(model, b, "prior_vs_std")
    p = model.prior({"x1": b.x["x1"]})
    mu, lv = p.mean.values, p.log_var.values
    assert np.allclose(mat, 0.5 * (np.exp(lv) + mu ** 2 - 1 - lv), atol=1e-12)


def test_pairing_needs_labels(model):
    b = random_batch(model)
    b.y = None
    with pytest.raises(ValueError, match="labels"):
        per_dim_kl_matrix(model, b, "q_vs_prior")
    assert per_dim_kl_matrix(model, b, "priorO_vs_qM").shape == (8, 3)


def test_collapse_report_rows(model):
    b = random_batch(model, rows=10)
    rows = collapse_report(model, b, CollapseConfig(), np.random.default_rng(0))
    pairings = {}
    for pairing, eps, frac in rows:
        pairings.setdefault(pairing, []).append(frac)
        assert 0.0 <= frac <= 1.0
    assert set(pairings) == {"q_vs_prior", "prior_vs_std", "q_vs_std", "priorO_vs_qM", "variance:x2"}
    assert all(len(v) == 61 for v in pairings.values())


def test_error_rate_cases():
    assert error_rate([0, 1, 2], [0, 1, 2]) == 0.0
    assert error_rate([1, 0, 1], [0, 1, 0]) == 1.0
    with pytest.raises(ValueError):
        error_rate([0, 1], [0])
    pred, truth = np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2])
    assert error_rate(pred, truth) + np.mean(pred == truth) == 1.0


def test_tie_breaks_to_lowest_index():
    assert predict_labels(np.array([[0.2, 0.4, 0.4], [0.5, 0.5, 0.0]])).tolist() == [1, 0]
    assert predict_labels(np.array([[0.5], [0.51]]), "single-sigmoid").tolist() == [0, 1]


def test_rmse_cases():
    rng = np.random.default_rng(0)
    a, b, c = rng.standard_normal((3, 6, 4))
    assert rmse(a, a) == 0.0
    assert rmse(a + 0.3, a) == pytest.approx(0.3, abs=1e-15)
    assert rmse(a, b) == pytest.approx(math.sqrt(np.sum((a - b) ** 2) / a.size), abs=1e-12)
    assert rmse(a, b) == rmse(b, a)
    # rmse is a scaled Euclidean norm, so the triangle inequality holds
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-15
    with pytest.raises(ValueError):
        rmse(a, b[:, :2])


def brute_ap(scores, positives):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions, hits = [], 0
    for rank, i in enumerate(order, 1):
        if positives[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def test_ap_cases():
    assert average_precision(np.array([0.9, 0.8, 0.1, 0.0]), np.array([1, 1, 0, 0])) == 1.0
    assert average_precision(np.array([0.9, 0.1]), np.array([0, 1])) == 0.5
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 15))
        scores = rng.integers(0, 4, n) / 3.0  # ties on purpose
        pos = rng.random(n) < 0.4
        pos[rng.integers(n)] = True
        assert average_precision(scores, pos) == pytest.approx(brute_ap(scores, pos), abs=1e-12)


def test_map_skips_empty_classes():
    scores = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]])
    labels = np.array([[1, 0, 0], [0, 1, 0]])
    value, skipped = mean_average_precision(scores, labels)
    assert value == 1.0 and skipped == [2]
    with pytest.raises(ValueError):
        mean_average_precision(scores, np.zeros((2, 3)))


def test_evaluate_reports_rows(model):
    b = random_batch(model, rows=20)
    report, gen = evaluate(model, b, np.random.default_rng(0))
    assert [r[:2] for r in report.rows] == [("error_rate", "label"), ("rmse", "x2")]
    assert report.get("rmse", "x2") == rmse(gen["x2"], b.x["x2"])
