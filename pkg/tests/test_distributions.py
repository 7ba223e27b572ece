import math

import numpy as np
import pytest
from scipy import integrate, stats

from cmmd.autograd import Tensor, grad_check
from cmmd.distributions import (
    BernoulliParams, CategoricalParams, GaussianParams, bernoulli_log_prob, categorical_log_prob,
    clamp_log_var, gaussian_kl, gaussian_log_prob, predict, reparam_sample,
)


def gp(mean, log_var):
    return GaussianParams(Tensor(np.asarray(mean, float)), Tensor(np.asarray(log_var, float)))


def mc_kl(mq, lq, mp, lp, n=1_000_000, seed=0):
    """Monte-Carlo E_q[log q - log p] for 1-D Gaussians."""
    rng = np.random.default_rng(seed)
    z = mq + math.exp(lq / 2) * rng.standard_normal(n)
    lq_pdf = stats.norm.logpdf(z, mq, math.exp(lq / 2))
    lp_pdf = stats.norm.logpdf(z, mp, math.exp(lp / 2))
    return float(np.mean(lq_pdf - lp_pdf))


def test_reparam_zero_noise_returns_mean():
    q = gp([[1.0, -2.0]], [[0.3, -1.0]])
    assert np.array_equal(reparam_sample(q, np.zeros((1, 2))).values, [[1.0, -2.0]])


def test_reparam_unit_noise_unit_variance():
    q = gp([[1.0, -2.0]], [[0.0, 0.0]])
    assert np.array_equal(reparam_sample(q, np.ones((1, 2))).values, [[2.0, -1.0]])


def test_reparam_moments():
    rng = np.random.default_rng(0)
    n = 100_000
    mean, log_var = np.array([0.5, -1.0]), np.array([0.4, -0.8])
    q = gp(np.tile(mean, (n, 1)), np.tile(log_var, (n, 1)))
    z = reparam_sample(q, rng.standard_normal((n, 2))).values
    assert np.allclose(z.mean(0), mean, rtol=0.02, atol=0.02 * np.exp(log_var / 2))
    assert np.allclose(z.var(0), np.exp(log_var), rtol=0.02)


def test_reparam_shape_mismatch():
    with pytest.raises(ValueError, match="reparam_sample"):
        reparam_sample(gp([[0.0]], [[0.0]]), np.zeros((1, 2)))


def test_reparam_gradients():
    noise = np.random.default_rng(1).standard_normal((2, 3))
    lv = np.random.default_rng(2).standard_normal((2, 3))
    mu = np.random.default_rng(3).standard_normal((2, 3))
    f_mu = lambda m: reparam_sample(GaussianParams(m, Tensor(lv)), noise).square().sum()
    f_lv = lambda l: reparam_sample(GaussianParams(Tensor(mu), l), noise).square().sum()
    assert grad_check(f_mu, mu) < 1e-4
    assert grad_check(f_lv, lv) < 1e-4


def test_kl_identical_is_zero():
    rng = np.random.default_rng(0)
    q = gp(rng.standard_normal((5, 4)), rng.standard_normal((5, 4)))
    per_dim, total = gaussian_kl(q, q)
    assert np.all(per_dim.values == 0.0) and np.all(total.values == 0.0)


def test_kl_unit_shift_matches_monte_carlo():
    per_dim, _ = gaussian_kl(gp([[1.0]], [[0.0]]), gp([[0.0]], [[0.0]]))
    assert per_dim.item() == pytest.approx(0.5, abs=1e-15)
    assert mc_kl(1.0, 0.0, 0.0, 0.0) == pytest.approx(0.5, rel=0.01)


def test_kl_asymmetry_against_oracle():
    a, _ = gaussian_kl(gp([[0.0]], [[1.0]]), gp([[0.0]], [[0.0]]))
    b, _ = gaussian_kl(gp([[0.0]], [[0.0]]), gp([[0.0]], [[1.0]]))
    assert a.item() != pytest.approx(b.item(), rel=0.05)
    assert a.item() == pytest.approx(mc_kl(0.0, 1.0, 0.0, 0.0), rel=0.01)
    assert b.item() == pytest.approx(mc_kl(0.0, 0.0, 0.0, 1.0, seed=1), rel=0.01)


def test_kl_total_sums_dims():
    rng = np.random.default_rng(4)
    q = gp(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    p = gp(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    per_dim, total = gaussian_kl(q, p)
    assert np.allclose(total.values, per_dim.values.sum(1), atol=1e-14)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(5)
    q = gp(rng.normal(0, 3, (10_000, 1)), rng.uniform(-7, 7, (10_000, 1)))
    p = gp(rng.normal(0, 3, (10_000, 1)), rng.uniform(-7, 7, (10_000, 1)))
    assert gaussian_kl(q, p)[0].values.min() >= -1e-12


def test_log_prob_standard_normal_origin():
    lp = gaussian_log_prob(gp([[0.0]], [[0.0]]), np.zeros((1, 1)))
    assert lp.item() == pytest.approx(-0.918938533204673, abs=1e-12)


def test_log_prob_symmetry():
    q = gp([[0.7, -0.2]], [[0.5, -1.0]])
    c = np.array([[0.3, 1.1]])
    up = gaussian_log_prob(q, q.mean.values + c).item()
    down = gaussian_log_prob(q, q.mean.values - c).item()
    assert up == pytest.approx(down, abs=1e-14)


def test_log_prob_matches_scipy():
    rng = np.random.default_rng(6)
    mean, lv, x = rng.standard_normal((3, 4, 5))
    ours = gaussian_log_prob(gp(mean, lv), x).values
    oracle = stats.norm.logpdf(x, mean, np.exp(lv / 2)).sum(1)
    assert np.allclose(ours, oracle, atol=1e-10, rtol=0)


def test_log_prob_integrates_to_one():
    rng = np.random.default_rng(7)
    for _ in range(10):
        mu, lv = rng.uniform(-2, 2), rng.uniform(-1.5, 1.5)
        q = gp([[mu]], [[lv]])
        f = lambda x: math.exp(gaussian_log_prob(q, np.array([[x]])).item())
        mass, _ = integrate.quad(f, -10, 10, points=[mu], limit=200)
        assert mass == pytest.approx(1.0, rel=0.01)


def test_bernoulli_half():
    x = np.array([[1.0, 0.0, 1.0]])
    lp = bernoulli_log_prob(BernoulliParams(Tensor(np.zeros((1, 3)))), x)
    assert lp.item() == pytest.approx(3 * math.log(0.5), abs=1e-14)


def test_bernoulli_clamp_boundary():
    lp = bernoulli_log_prob(BernoulliParams(Tensor(np.full((1, 2), 800.0))), np.ones((1, 2)))
    assert lp.item() == pytest.approx(2 * math.log1p(-1e-7), rel=1e-9)
    lp0 = bernoulli_log_prob(BernoulliParams(Tensor(np.full((1, 1), -800.0))), np.ones((1, 1)))
    assert lp0.item() == pytest.approx(math.log(1e-7), rel=1e-12)


def test_bernoulli_matches_formula():
    rng = np.random.default_rng(8)
    logits = rng.normal(0, 2, (4, 6))
    x = rng.random((4, 6))
    p = 1 / (1 + np.exp(-logits))
    oracle = (x * np.log(p) + (1 - x) * np.log(1 - p)).sum(1)
    assert np.allclose(bernoulli_log_prob(BernoulliParams(Tensor(logits)), x).values, oracle, atol=1e-10, rtol=0)


def test_categorical_uniform():
    k = 5
    y = np.eye(k)[[2]]
    lp = categorical_log_prob(CategoricalParams(Tensor(np.zeros((1, k)))), y)
    assert lp.item() == pytest.approx(math.log(1 / k), abs=1e-14)


def test_categorical_extreme_logits():
    lp = categorical_log_prob(CategoricalParams(Tensor(np.array([[10.0, -10.0]]))), np.array([[1.0, 0.0]]))
    assert lp.item() == pytest.approx(-math.log1p(math.exp(-20)), rel=1e-6)
    assert lp.item() == pytest.approx(-2.06e-9, rel=0.01)


def test_categorical_multilabel_matches_bernoulli():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((4, 3))
    y = (rng.random((4, 3)) < 0.5).astype(float)
    lp = categorical_log_prob(CategoricalParams(Tensor(logits), "independent-sigmoid"), y).values
    p = 1 / (1 + np.exp(-logits))
    oracle = (y * np.log(p) + (1 - y) * np.log(1 - p)).sum(1)
    assert np.allclose(lp, oracle, atol=1e-10, rtol=0)


def test_categorical_rejects_non_one_hot():
    with pytest.raises(ValueError, match="one-hot"):
        categorical_log_prob(CategoricalParams(Tensor(np.zeros((1, 3)))), np.array([[1.0, 1.0, 0.0]]))


def test_log_var_clamp():
    assert np.array_equal(clamp_log_var(Tensor(np.array([-9.0, 0.5, 9.0]))).values, [-7.0, 0.5, 7.0])


def test_predict_ties_to_lowest_index():
    assert predict(CategoricalParams(Tensor(np.array([[1.0, 3.0, 3.0]])))).tolist() == [1]
    assert predict(CategoricalParams(Tensor(np.array([[0.0, 0.1]])), "independent-sigmoid")).tolist() == [[0, 1]]


def test_shape_errors():
    with pytest.raises(ValueError):
        gp([[0.0]], [[0.0, 1.0]])
    with pytest.raises(ValueError, match="gaussian_kl"):
        gaussian_kl(gp([[0.0]], [[0.0]]), gp([[0.0, 0.0]], [[0.0, 0.0]]))
    with pytest.raises(ValueError):
        CategoricalParams(Tensor(np.zeros((1, 2))), "bogus")
