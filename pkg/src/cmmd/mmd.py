"""Gaussian-kernel maximum mean discrepancy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, sqdist


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth policy for the Gaussian kernel.

    ``policy`` is one of ``"fixed"`` (uses ``sigma2``), ``"latent_dim"``
    (sigma^2 = dimension of the samples) or ``"median_heuristic"`` (half the median
    pairwise squared distance of the pooled samples, held constant).
    """

    policy: str = "latent_dim"
    sigma2: float | None = None
    scales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.policy not in ("fixed", "latent_dim", "median_heuristic"):
            raise ValueError(f"unknown bandwidth policy {self.policy!r}")
        if self.policy == "fixed" and (self.sigma2 is None or self.sigma2 <= 0):
            raise ValueError("fixed bandwidth needs sigma2 > 0")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"kernel scales must be positive and nonempty, got {self.scales}")

    def resolve(self, a: np.ndarray, b: np.ndarray) -> float:
        if self.policy == "fixed":
            return float(self.sigma2)
        if self.policy == "latent_dim":
            return float(a.shape[-1])
        pooled = np.concatenate([a, b])
        d = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1)
        off = d[~np.eye(len(pooled), dtype=bool)]
        med = float(np.median(off)) / 2.0
        if med <= 0:
            raise ValueError("median heuristic produced a zero bandwidth")
        return med


def gaussian_kernel(a, b, cfg: KernelConfig = KernelConfig()) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"gaussian_kernel: dims differ {a.shape} vs {b.shape}")
    if cfg.policy == "median_heuristic":
        raise ValueError("gaussian_kernel: median bandwidth needs a sample set, resolve it first")
    sigma2 = cfg.resolve(a[None], b[None])
    d = float(((a - b) ** 2).sum())
    return sum(math.exp(-d / (2.0 * sigma2 * s)) for s in cfg.scales) / len(cfg.scales)


def _kernel_matrix(a: Tensor, b: Tensor, sigma2: float, scales) -> Tensor:
    d = sqdist(a, b)
    k = None
    for s in scales:
        term = (d * (-1.0 / (2.0 * sigma2 * s))).exp()
        k = term if k is None else k + term
    return k if len(scales) == 1 else k * (1.0 / len(scales))


def _canonical(t: Tensor) -> Tensor:
    order = np.lexsort(t.values.T[::-1])
    return t if np.array_equal(order, np.arange(len(order))) else t[order]


def mmd_sq(samples_a, samples_b, cfg: KernelConfig = KernelConfig(),
           estimator: str = "u_statistic") -> Tensor:
    """Squared MMD between two sample sets; differentiable in both.

    Rows are put in lexicographic order and the cross term is always taken
    in a canonical orientation, so the result is exactly symmetric in its
    arguments and exactly zero for the v-statistic on identical multisets.
    """
    a = samples_a if isinstance(samples_a, Tensor) else Tensor(samples_a)
    b = samples_b if isinstance(samples_b, Tensor) else Tensor(samples_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"mmd_sq: incompatible sample shapes {a.shape} and {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if estimator not in ("u_statistic", "v_statistic"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "u_statistic" and (n < 2 or m < 2):
        raise ValueError(f"mmd_sq: u-statistic needs >= 2 samples per side, got {n} and {m}")
    sigma2 = cfg.resolve(a.values, b.values)
    a, b = _canonical(a), _canonical(b)
    k_aa = _kernel_matrix(a, a, sigma2, cfg.scales)
    k_bb = _kernel_matrix(b, b, sigma2, cfg.scales)
    first, second = (a, b) if (n, a.values.tobytes()) <= (m, b.values.tobytes()) else (b, a)
    e_ab = _kernel_matrix(first, second, sigma2, cfg.scales).mean()
    if estimator == "u_statistic":
        e_aa = (k_aa * (1.0 - np.eye(n))).sum() * (1.0 / (n * (n - 1)))
        e_bb = (k_bb * (1.0 - np.eye(m))).sum() * (1.0 / (m * (m - 1)))
    else:
        e_aa = k_aa.mean()
        e_bb = k_bb.mean()
    return (e_aa + e_bb) - 2.0 * e_ab
