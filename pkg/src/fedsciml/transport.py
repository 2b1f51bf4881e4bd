"""Exact 1-Wasserstein distances between empirical point clouds."""
from __future__ import annotations

import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np

# POT probes every array backend it knows at import time; only numpy is used here
for _key in ("POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX",
             "POT_BACKEND_DISABLE_TENSORFLOW", "POT_BACKEND_DISABLE_CUPY"):
    os.environ.setdefault(_key, "1")
import ot  # noqa: E402

DEFAULT_POINT_CAP = 10_000


@dataclass(frozen=True)
class DiscreteDistribution:
    support: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        s = np.asarray(self.support, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        w = np.asarray(self.weights, dtype=np.float64)
        if s.shape[0] == 0:
            raise ValueError("empty support")
        if w.shape != (s.shape[0],):
            raise ValueError("one weight per support point required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empirical(cls, points, cap: int | None = DEFAULT_POINT_CAP, seed: int = 0):
        """Uniform weights over ``points``, uniformly subsampled above ``cap``."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if cap is not None and len(pts) > cap:
            idx = np.sort(np.random.default_rng(seed).choice(len(pts), cap, replace=False))
            pts = pts[idx]
        n = len(pts)
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.support.shape[1]


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float


def cost_matrix(mu: DiscreteDistribution, nu: DiscreteDistribution) -> np.ndarray:
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    diff = mu.support[:, None, :] - nu.support[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def emd_w1(mu: DiscreteDistribution, nu: DiscreteDistribution) -> tuple[float, TransportPlan]:
    """Optimal transport cost under Euclidean ground cost (network simplex)."""
    m = cost_matrix(mu, nu)
    gamma = ot.emd(mu.weights, nu.weights, m, numItermax=10_000_000)
    cost = float(np.sum(gamma * m))
    return cost, TransportPlan(gamma, cost)


def w1(points_a, points_b, cap: int | None = DEFAULT_POINT_CAP, seed: int = 0) -> float:
    return emd_w1(DiscreteDistribution.empirical(points_a, cap, seed),
                  DiscreteDistribution.empirical(points_b, cap, seed + 1))[0]


def w1_1d_closed_form(mu: DiscreteDistribution, nu: DiscreteDistribution) -> float:
    """Integral over quantile levels of |F_mu^-1 - F_nu^-1|."""
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("closed form applies to 1D supports only")
    xa, wa = _sorted(mu)
    xb, wb = _sorted(nu)
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    # quantile of each level interval: first index whose cdf reaches the interval's right end
    ia = np.minimum(np.searchsorted(ca, levels - 0.5 * widths), len(xa) - 1)
    ib = np.minimum(np.searchsorted(cb, levels - 0.5 * widths), len(xb) - 1)
    return float(np.sum(widths * np.abs(xa[ia] - xb[ib])))


def _sorted(d: DiscreteDistribution):
    order = np.argsort(d.support[:, 0], kind="stable")
    return d.support[order, 0], d.weights[order]


def mean_pairwise_w1(dists: list[DiscreteDistribution]) -> float:
    """Heterogeneity across K clients.

    For K >= 3 the sum of pairwise distances is scaled by 1/((K-2)(K-1)),
    the established normalization for this measure; note it is
    not the reciprocal of the number of pairs. K = 2 returns the plain W1.
    """
    k = len(dists)
    if k < 2:
        raise ValueError("need at least two distributions")
    if k == 2:
        return emd_w1(dists[0], dists[1])[0]
    total = sum(emd_w1(dists[i], dists[j])[0] for i, j in combinations(range(k), 2))
    return total / ((k - 2) * (k - 1))


def shard_heterogeneity(point_sets, cap: int | None = DEFAULT_POINT_CAP, seed: int = 0) -> float:
    dists = [DiscreteDistribution.empirical(p, cap, seed + i) for i, p in enumerate(point_sets)]
    return mean_pairwise_w1(dists)
