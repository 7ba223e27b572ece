"""Diagonal Gaussian, Bernoulli and categorical primitives on autograd tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, apply, log_softmax, sigmoid

LOG_VAR_MIN, LOG_VAR_MAX = -7.0, 7.0
PROB_EPS = 1e-7
LOG_2PI = math.log(2.0 * math.pi)

CLASS_MODES = ("softmax", "independent-sigmoid", "single-sigmoid")


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.values)


@dataclass
class BernoulliParams:
    logits: Tensor

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(Tensor(self.logits.values)).values


@dataclass
class CategoricalParams:
    logits: Tensor
    mode: str = "softmax"

    def __post_init__(self):
        if self.mode not in CLASS_MODES:
            raise ValueError(f"unknown classifier mode {self.mode!r}")

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.values
        if self.mode == "softmax":
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return sigmoid(Tensor(z)).values


def clamp_log_var(log_var: Tensor) -> Tensor:
    return log_var.clip(LOG_VAR_MIN, LOG_VAR_MAX)


def _check_same(op: str, a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reparam_sample(params: GaussianParams, noise) -> Tensor:
    """mean + exp(log_var / 2) * noise"""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    _check_same("reparam_sample", params.mean, noise)
    return params.mean + (params.log_var * 0.5).exp() * noise


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> tuple[Tensor, Tensor]:
    """KL(q || p) between diagonal Gaussians, per dimension and summed over the last axis."""
    _check_same("gaussian_kl", q.mean, p.mean)
    diff = q.mean - p.mean
    per_dim = 0.5 * ((q.log_var - p.log_var).exp()
                     + diff.square() * (-p.log_var).exp()
                     - 1.0 + p.log_var - q.log_var)
    return per_dim, per_dim.sum(axis=-1)


def gaussian_log_prob(params: GaussianParams, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_same("gaussian_log_prob", params.mean, x)
    sq = (x - params.mean).square() * (-params.log_var).exp()
    return -0.5 * (LOG_2PI + params.log_var + sq).sum(axis=-1)


def bernoulli_log_prob(params: BernoulliParams, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_same("bernoulli_log_prob", params.logits, x)
    p = sigmoid(params.logits).clip(PROB_EPS, 1.0 - PROB_EPS)
    return (x * p.log() + (1.0 - x) * (1.0 - p).log()).sum(axis=-1)


def categorical_log_prob(params: CategoricalParams, y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(y)
    _check_same("categorical_log_prob", params.logits, y)
    if params.mode == "softmax":
        rows = y.values
        if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=-1) == 1)):
            raise ValueError("categorical_log_prob: softmax mode requires one-hot label rows")
        return (log_softmax(params.logits) * y).sum(axis=-1)
    return bernoulli_log_prob(BernoulliParams(params.logits), y)


def predict(params: CategoricalParams) -> np.ndarray:
    """Hard labels; ties go to the lowest class index, p = 0.5 maps to 0."""
    probs = params.probs
    if params.mode == "softmax":
        return np.argmax(probs, axis=-1)
    return (probs > 0.5).astype(np.int64)


__all__ = [
    "GaussianParams", "BernoulliParams", "CategoricalParams", "clamp_log_var",
    "reparam_sample", "gaussian_kl", "gaussian_log_prob", "bernoulli_log_prob",
    "categorical_log_prob", "predict", "apply",
]
