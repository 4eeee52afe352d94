"""Weighted RBF-kernel MMD between a re-weighted source and a uniform target."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, as_matrix, pairwise_sq_dists


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")


@dataclass
class Mmd2Result:
    value: float
    grad_src: np.ndarray
    grad_w: np.ndarray
    grad_tgt: np.ndarray


def rbf_gram(a, b, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    if not cfg.bandwidth > 0:
        raise ValueError("kernel bandwidth must be positive")
    return np.exp(-pairwise_sq_dists(a, b) / (2.0 * cfg.bandwidth**2))


def weighted_mmd2(z_src, w, z_tgt, cfg: KernelConfig = KernelConfig()) -> Mmd2Result:
    """Biased (V-statistic) squared MMD with gradients.

    value = w'Kss w / n^2 - 2 w'Kst 1 / (n m) + 1'Ktt 1 / m^2

    Weights are used as given. Callers own the mean-one normalisation.
    """
    zs = as_matrix(z_src, "z_src")
    zt = as_matrix(z_tgt, "z_tgt")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n, m = zs.shape[0], zt.shape[0]
    if w.shape[0] != n:
        raise ShapeError(f"{w.shape[0]} weights for {n} source rows")
    if zs.shape[1] != zt.shape[1]:
        raise ShapeError(f"source dim {zs.shape[1]} != target dim {zt.shape[1]}")
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    if not np.all(w > 0):
        raise ValueError("weights must be strictly positive")

    inv_s2 = 1.0 / cfg.bandwidth**2
    kss = rbf_gram(zs, zs, cfg)
    kst = rbf_gram(zs, zt, cfg)
    ktt = rbf_gram(zt, zt, cfg)

    kss_w = kss @ w
    kst_1 = kst.sum(1)
    value = w @ kss_w / n**2 - 2.0 * (w @ kst_1) / (n * m) + ktt.sum() / m**2

    grad_w = 2.0 * kss_w / n**2 - 2.0 * kst_1 / (n * m)

    # d k(a, b) / d a = -k(a, b) (a - b) / s^2
    a_ss = kss * w[None, :]  # w_j k_ij
    g_ss = -(2.0 / n**2) * inv_s2 * w[:, None] * (a_ss.sum(1)[:, None] * zs - a_ss @ zs)
    a_st = kst * w[:, None]  # w_i k_ij
    g_st = (2.0 / (n * m)) * inv_s2 * (a_st.sum(1)[:, None] * zs - a_st @ zt)
    grad_src = g_ss + g_st

    # target side: from the cross term and the target-target term
    g_ts = (2.0 / (n * m)) * inv_s2 * (a_st.sum(0)[:, None] * zt - a_st.T @ zs)
    g_tt = -(2.0 / m**2) * inv_s2 * (ktt.sum(1)[:, None] * zt - ktt @ zt)
    grad_tgt = g_ts + g_tt

    return Mmd2Result(float(value), grad_src, grad_w, grad_tgt)


@dataclass
class GramSummary:
    """Kernel sums that fix the MMD^2 value and weight gradient for frozen samples."""

    kss: np.ndarray
    kst_rowsum: np.ndarray
    ktt_sum: float
    m: int


def gram_summary(z_src, z_tgt, cfg: KernelConfig = KernelConfig()) -> GramSummary:
    zt = as_matrix(z_tgt, "z_tgt")
    return GramSummary(rbf_gram(z_src, z_src, cfg), rbf_gram(z_src, zt, cfg).sum(1),
                       float(rbf_gram(zt, zt, cfg).sum()), zt.shape[0])


def mmd2_weights(g: GramSummary, w) -> tuple[float, np.ndarray]:
    """Value and weight gradient of ``weighted_mmd2`` from precomputed kernel sums."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n, m = w.shape[0], g.m
    kw = g.kss @ w
    value = w @ kw / n**2 - 2.0 * (w @ g.kst_rowsum) / (n * m) + g.ktt_sum / m**2
    return float(value), 2.0 * kw / n**2 - 2.0 * g.kst_rowsum / (n * m)
