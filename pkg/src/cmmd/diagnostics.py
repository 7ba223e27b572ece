"""Posterior-collapse curves, decoder-variance collapse, and task metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .distributions import GaussianParams, gaussian_kl
from .model import Batch, CmmdModel

PAIRINGS = ("q_vs_prior", "prior_vs_std", "q_vs_std", "priorO_vs_qM")
# priorO_vs_qM stands in for KL[z|x_O || z|x_M]: the model has no standalone
# x_M posterior, so the encoder is run with only the x_M block populated.
PROXY_PAIRINGS = ("priorO_vs_qM",)


def default_epsilon_grid() -> np.ndarray:
    return np.linspace(0.0, 6.0, 61)


@dataclass(frozen=True)
class CollapseConfig:
    delta: float = 0.01
    epsilons: tuple[float, ...] = tuple(default_epsilon_grid())
    pairings: tuple[str, ...] = PAIRINGS

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        eps = np.asarray(self.epsilons)
        if eps.size == 0 or np.any(eps < 0) or np.any(np.diff(eps) <= 0):
            raise ValueError("epsilon grid must be nonempty, nonnegative and strictly increasing")
        unknown = set(self.pairings) - set(PAIRINGS)
        if unknown:
            raise ValueError(f"unknown pairings {sorted(unknown)}")


def _std_normal_like(g: GaussianParams) -> GaussianParams:
    zeros = np.zeros(g.mean.shape)
    return GaussianParams(Tensor(zeros), Tensor(zeros.copy()))


def per_dim_kl_matrix(model: CmmdModel, data: Batch, pairing: str) -> np.ndarray:
    """Datapoints x latent-dims matrix of one-dimensional Gaussian KLs (eval mode)."""
    part = model.partition
    x_O = {k: data.x[k] for k in part.observed}
    if pairing in ("q_vs_prior", "q_vs_std"):
        if data.y is None:
            raise ValueError(f"pairing {pairing!r} needs labels for the encoder")
        missing = [k for k in part.missing if k not in data.x]
        if missing:
            raise ValueError(f"pairing {pairing!r} needs modalities {missing}")
    if pairing == "q_vs_prior":
        left = model.encode(x_O, {k: data.x[k] for k in part.missing}, data.y)
        right = model.prior(x_O)
    elif pairing == "prior_vs_std":
        left = model.prior(x_O)
        right = _std_normal_like(left)
    elif pairing == "q_vs_std":
        left = model.encode(x_O, {k: data.x[k] for k in part.missing}, data.y)
        right = _std_normal_like(left)
    elif pairing == "priorO_vs_qM":
        left = model.prior(x_O)
        zero_O = {k: np.zeros_like(v) for k, v in x_O.items()}
        right = model.encode(zero_O, {k: data.x[k] for k in part.missing}, None)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    per_dim, _ = gaussian_kl(left, right)
    return per_dim.values


def _qualifying_fraction(matrix: np.ndarray, eps: float, delta: float) -> float:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("collapse matrix must be a nonempty 2-D array")
    n = matrix.shape[0]
    below = (matrix < eps).sum(axis=0)
    return float(np.mean(below >= (1.0 - delta) * n))


def collapse_fraction(matrix: np.ndarray, eps: float, delta: float = 0.01) -> float:
    """Fraction of columns whose entries are < eps for at least (1 - delta) of rows."""
    if eps < 0 or not 0 < delta < 1:
        raise ValueError("need eps >= 0 and 0 < delta < 1")
    return _qualifying_fraction(matrix, eps, delta)


def collapse_curve(matrix: np.ndarray, epsilons, delta: float = 0.01) -> np.ndarray:
    return np.array([collapse_fraction(matrix, e, delta) for e in epsilons])


def variance_collapse(variances: np.ndarray, epsilons, delta: float = 0.01) -> np.ndarray:
    """Same counting rule applied to decoder variances (features as columns)."""
    variances = np.asarray(variances, dtype=np.float64)
    if np.any(variances <= 0):
        raise ValueError("decoder variances must be positive")
    return np.array([_qualifying_fraction(variances, e, delta) for e in epsilons])


def decoder_variances(model: CmmdModel, data: Batch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Variances of the gaussian decoders at test-time (prior-sampled) latents."""
    from .distributions import reparam_sample

    x_O = {k: data.x[k] for k in model.partition.observed}
    p = model.prior(x_O)
    z = reparam_sample(p, rng.standard_normal(p.mean.shape))
    out = {}
    for name, params in model.decode(x_O, z).items():
        if isinstance(params, GaussianParams):
            out[name] = np.exp(params.log_var.values)
    return out


def collapse_report(model: CmmdModel, data: Batch, cfg: CollapseConfig = CollapseConfig(),
                    rng: np.random.Generator | None = None) -> list[tuple[str, float, float]]:
    """Rows ``(pairing, epsilon, fraction)``; decoder variances appear as ``variance:<name>``."""
    rows = []
    for pairing in cfg.pairings:
        if pairing in ("q_vs_prior", "q_vs_std") and data.y is None:
            continue
        mat = per_dim_kl_matrix(model, data, pairing)
        for eps, frac in zip(cfg.epsilons, collapse_curve(mat, cfg.epsilons, cfg.delta)):
            rows.append((pairing, float(eps), float(frac)))
    if rng is not None:
        for name, var in decoder_variances(model, data, rng).items():
            for eps, frac in zip(cfg.epsilons, variance_collapse(var, cfg.epsilons, cfg.delta)):
                rows.append((f"variance:{name}", float(eps), float(frac)))
    return rows


# ---------------------------------------------------------------------------
# task metrics

def error_rate(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"error_rate: length mismatch {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ValueError("error_rate: empty input")
    return float(np.mean(predicted != truth))


def predict_labels(probs: np.ndarray, mode: str = "softmax") -> np.ndarray:
    """argmax with ties to the lowest index; binary mode thresholds p > 0.5."""
    probs = np.asarray(probs)
    if mode == "softmax":
        return np.argmax(probs, axis=-1)
    hard = (probs > 0.5).astype(np.int64)
    return hard[:, 0] if mode == "single-sigmoid" else hard


def rmse(generated, truth) -> float:
    generated = np.asarray(generated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if generated.shape != truth.shape:
        raise ValueError(f"rmse: shape mismatch {generated.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((generated - truth) ** 2)))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise ValueError("average_precision: no positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, labels) -> tuple[float, list[int]]:
    """Mean over classes of average precision; returns (mAP, skipped class indices)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"mAP: scores {scores.shape} and labels {labels.shape} must be equal-shape matrices")
    aps, skipped = [], []
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            aps.append(average_precision(scores[:, c], labels[:, c]))
        else:
            skipped.append(c)
    if not aps:
        raise ValueError("mAP: no class has a positive example")
    return float(np.mean(aps)), skipped


@dataclass
class MetricsReport:
    rows: list[tuple[str, str, float]]

    def get(self, metric: str, target: str) -> float:
        for m, t, v in self.rows:
            if m == metric and t == target:
                return v
        raise KeyError((metric, target))


def evaluate(model: CmmdModel, data: Batch, rng: np.random.Generator, samples: int = 1,
             label_mode: str | None = None) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Test-time protocol: only x_O reaches the model; x_M and y are used for scoring."""
    x_O = {k: data.x[k] for k in model.partition.observed}
    generated, probs, _ = model.forward_test(x_O, rng, samples)
    rows = []
    mode = label_mode or model.class_mode
    if data.y is not None:
        if mode == "independent-sigmoid":
            m, _ = mean_average_precision(probs, data.y)
            rows.append(("mAP", "label", m))
        elif mode == "single-sigmoid":
            rows.append(("error_rate", "label", error_rate(predict_labels(probs, mode), data.y[:, 0].astype(int))))
        else:
            rows.append(("error_rate", "label", error_rate(predict_labels(probs), np.argmax(data.y, axis=1))))
    for name in model.partition.missing:
        if name in data.x:
            rows.append(("rmse", name, rmse(generated[name], data.x[name])))
    return MetricsReport(rows), generated
