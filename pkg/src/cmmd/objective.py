"""The CMMD objective, the plain ELBO, and mutual-information diagnostics.

All objectives are *maximized*; the trainer minimizes their negation.  Every
term is a batch mean, so ``alpha`` and ``lam`` transfer across batch sizes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .distributions import (
    BernoulliParams, LOG_2PI, bernoulli_log_prob, categorical_log_prob,
    gaussian_kl, gaussian_log_prob, reparam_sample,
)
from .mmd import KernelConfig, mmd_sq
from .model import Batch, CmmdModel

OMEGA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, terms: dict[str, float]):
        self.terms = terms
        super().__init__("non-finite objective: " + ", ".join(f"{k}={v!r}" for k, v in terms.items()))


@dataclass(frozen=True)
class ObjectiveConfig:
    omega: float = 0.5
    alpha: float = 10.0
    lam: float = 1000.0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    estimator: str = "u_statistic"

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.alpha < 0 or self.lam <= 0:
            raise ValueError("alpha must be >= 0 and lambda > 0")


@dataclass
class ObjectiveBreakdown:
    """Batch-mean terms of one objective evaluation (higher total is better)."""

    recon: Tensor
    class_log_prob: Tensor
    kl: Tensor
    mmd: Tensor
    total: Tensor
    omega: float
    alpha: float
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {
            "recon_log_prob": self.recon.item(),
            "class_log_prob": self.class_log_prob.item(),
            "kl_term": self.kl.item(),
            "mmd_term": self.mmd.item(),
            "total_objective": self.total.item(),
        }


def assemble(recon, class_lp, kl, mmd, omega: float, alpha: float, lam: float):
    """total = recon + alpha*class - omega*kl - (1-omega)*lam*mmd, in that order."""
    return recon + alpha * class_lp - omega * kl - ((1.0 - omega) * lam) * mmd


def reconstruction_log_prob(decoder_params: dict, batch: Batch) -> Tensor:
    total = None
    for name, params in decoder_params.items():
        x = batch.x[name]
        if isinstance(params, BernoulliParams):
            lp = bernoulli_log_prob(params, x)
        else:
            lp = gaussian_log_prob(params, x)
        total = lp if total is None else total + lp
    return total


def marginal_q_samples(model: CmmdModel, batch: Batch, rng: np.random.Generator,
                       train: bool = True, use_labels: bool = True) -> Tensor:
    """One draw per row from the batch-empirical q(z | x_O).

    Each row keeps its own ``x_O`` and takes the ``(x_M, y)`` tuple of a row
    drawn uniformly (with replacement) from the batch.
    """
    n = len(batch)
    if n < 2:
        raise ValueError("marginal_q_samples needs a batch of at least 2 rows")
    idx = rng.integers(0, n, size=n)
    x_O = {k: batch.x[k] for k in model.partition.observed}
    x_M = {k: batch.x[k][idx] for k in model.partition.missing}
    y = batch.y[idx] if (use_labels and batch.y is not None) else None
    q = model.encode(x_O, x_M, y, train, rng)
    return reparam_sample(q, rng.standard_normal(q.mean.shape))


def cmmd_loss(model: CmmdModel, batch: Batch, cfg: ObjectiveConfig, rng: np.random.Generator,
              train: bool = True, use_labels: bool = True, noise_q=None, noise_p=None) -> ObjectiveBreakdown:
    if len(batch) < 2:
        raise ValueError(f"cmmd_loss: batch size must be >= 2, got {len(batch)}")
    if use_labels and batch.y is None:
        raise ValueError("cmmd_loss: batch has no labels")
    out = model.forward_train(batch, rng, train, noise_q=noise_q, noise_p=noise_p, use_labels=use_labels)
    recon = reconstruction_log_prob(out.decoder_params, batch).mean()
    if use_labels:
        class_lp = categorical_log_prob(out.class_params, batch.y).mean()
    else:
        class_lp = Tensor(0.0)
    _, kl_total = gaussian_kl(out.q_params, out.prior_params)
    kl = kl_total.mean()
    z_marg = marginal_q_samples(model, batch, rng, train, use_labels)
    mmd = mmd_sq(z_marg, out.z_p, cfg.kernel, cfg.estimator)
    total = assemble(recon, class_lp, kl, mmd, cfg.omega, cfg.alpha, cfg.lam)
    result = ObjectiveBreakdown(recon, class_lp, kl, mmd, total, cfg.omega, cfg.alpha, cfg.lam)
    if not np.isfinite(total.values):
        raise NonFiniteLoss(result.as_floats())
    return result


def elbo(model: CmmdModel, batch: Batch, rng: np.random.Generator,
         cfg: ObjectiveConfig | None = None, **kwargs) -> ObjectiveBreakdown:
    """The lower bound: the CMMD objective at omega = 1 (MMD reported, weight zero)."""
    base = cfg or ObjectiveConfig()
    return cmmd_loss(model, batch, ObjectiveConfig(1.0, base.alpha, base.lam, base.kernel, base.estimator),
                     rng, **kwargs)


# ---------------------------------------------------------------------------
# mutual-information diagnostics

def _gauss_logpdf(z: np.ndarray, mean: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    return -0.5 * (LOG_2PI + log_var + (z - mean) ** 2 * np.exp(-log_var)).sum(-1)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class MiDecomposition:
    avg_kl: float
    marginal_kl: float
    mi_estimate: float
    standard_error: float


def mi_decomposition(model: CmmdModel, dataset: Batch, rng: np.random.Generator,
                     n_mc: int = 256, n_samples: int = 16) -> MiDecomposition:
    """Split the average KL into mutual information plus marginal KL.

    For each row the aggregate posterior q(z | x_O) is the mixture of the
    encoder evaluated at that row's ``x_O`` with ``n_mc`` (x_M, y) tuples
    taken from the dataset (all of them when ``n_mc >= len(dataset)``,
    otherwise a uniform subset without replacement).  Its KL to the prior
    is estimated from ``n_samples`` mixture draws per row.
    """
    n = len(dataset)
    if n == 0 or n_mc < 1 or n_samples < 1:
        raise ValueError("mi_decomposition needs a nonempty dataset, n_mc >= 1 and n_samples >= 1")
    part = model.partition
    x_O = {k: dataset.x[k] for k in part.observed}
    x_M = {k: dataset.x[k] for k in part.missing}
    q = model.encode(x_O, x_M, dataset.y)
    p = model.prior(x_O)
    _, kl_rows = gaussian_kl(q, p)
    avg_kl = float(kl_rows.values.mean())

    n_comp = min(n_mc, n)
    per_row = np.empty(n)
    per_row_var = np.empty(n)
    for i in range(n):
        comps = np.arange(n) if n_mc >= n else rng.choice(n, size=n_comp, replace=False)
        xo_i = {k: np.repeat(v[i:i + 1], n_comp, axis=0) for k, v in x_O.items()}
        xm_c = {k: v[comps] for k, v in x_M.items()}
        y_c = None if dataset.y is None else dataset.y[comps]
        qc = model.encode(xo_i, xm_c, y_c)
        mu, lv = qc.mean.values, qc.log_var.values
        pick = rng.integers(0, n_comp, size=n_samples)
        z = mu[pick] + np.exp(0.5 * lv[pick]) * rng.standard_normal((n_samples, model.latent_dim))
        log_comp = _gauss_logpdf(z[:, None, :], mu[None], lv[None])
        log_mix = _logsumexp(log_comp, axis=1) - math.log(n_comp)
        log_prior = _gauss_logpdf(z, p.mean.values[i], p.log_var.values[i])
        ratio = log_mix - log_prior
        per_row[i] = ratio.mean()
        per_row_var[i] = ratio.var(ddof=1) if n_samples > 1 else 0.0
    marginal_kl = float(per_row.mean())
    # standard error of the mean of per-row (analytic KL - mixture estimate)
    if n > 1:
        se = math.sqrt(np.var(kl_rows.values - per_row, ddof=1) / n)
    else:
        se = math.sqrt(per_row_var[0] / n_samples)
    return MiDecomposition(avg_kl, marginal_kl, avg_kl - marginal_kl, se)


def mi_upper_bound_check(model: CmmdModel, dataset: Batch, rng: np.random.Generator,
                         n_mc: int = 256, n_samples: int = 16) -> dict:
    d = mi_decomposition(model, dataset, rng, n_mc, n_samples)
    return {
        "avg_kl": d.avg_kl,
        "mi_estimate": d.mi_estimate,
        "standard_error": d.standard_error,
        "holds": d.avg_kl >= d.mi_estimate - 3.0 * d.standard_error,
    }
