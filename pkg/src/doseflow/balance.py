"""Differentiable dependence penalties between a representation and the dosage.

Two estimators are provided: the biased HSIC V-statistic with Gaussian
kernels, and an entropic optimal-transport distance between the observed
(representation, dosage) cloud and a copy with the dosages permuted across
units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

from . import numcore as nc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HsicConfig:
    """Kernel bandwidths; ``None`` selects the median heuristic per batch."""

    sigma_r: Optional[float] = None
    sigma_t: Optional[float] = None
    normalization: str = "n-1"  # "n-1" divides by (n-1)^2, "n" by n^2

    def __post_init__(self):
        for name in ("sigma_r", "sigma_t"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.normalization not in ("n-1", "n"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class WassersteinConfig:
    epsilon: float = 0.1
    max_iter: int = 200
    tol: float = 1e-9
    seed: int = 0
    cost_scale: Optional[float] = None  # None: batch mean of the ground cost

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.cost_scale is not None and not self.cost_scale > 0:
            raise ValueError("cost_scale must be positive")


def _as_matrix(x):
    v = nc.value_of(x)
    if v.ndim == 1:
        return nc.reshape(x, (-1, 1)) if isinstance(x, nc.Tensor) else np.asarray(v, dtype=float)[:, None]
    return x if isinstance(x, nc.Tensor) else np.asarray(v, dtype=float)


def _median_nonzero(d) -> float:
    d = d[d > 0]
    if d.size == 0:
        log.info("median heuristic: all points identical, falling back to bandwidth 1.0")
        return 1.0
    return float(np.median(d))


def median_heuristic(points) -> float:
    """Median of the nonzero pairwise Euclidean distances between rows."""
    pts = np.asarray(nc.value_of(points), dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return _median_nonzero(pdist(pts) if len(pts) > 1 else np.empty(0))


def _median_from_sq(D2: np.ndarray) -> float:
    # relative floor drops the cancellation noise of the expanded form on duplicate rows
    iu = np.triu_indices(D2.shape[0], k=1)
    d2 = D2[iu]
    d2 = np.where(d2 > 1e-12 * max(float(D2.max()), 1e-300), d2, 0.0)
    return _median_nonzero(np.sqrt(d2))


def sq_distances(A, B=None):
    """Pairwise squared Euclidean distances, taped when inputs are Tensors."""
    B = A if B is None else B
    a2 = nc.sum(nc.square(A), axis=1, keepdims=True)
    b2 = nc.sum(nc.square(B), axis=1, keepdims=True)
    return a2 + nc.transpose(b2) - 2.0 * nc.matmul(A, nc.transpose(B))


def gaussian_gram(X, sigma: Optional[float] = None):
    """exp(-|x_i - x_j|^2 / (2 sigma^2)); ``sigma=None`` uses the median heuristic."""
    D2 = sq_distances(X)
    if sigma is None:
        sigma = _median_from_sq(nc.value_of(D2))
    return nc.exp(D2 * (-0.5 / sigma ** 2))


def _center(M):
    """H M H with H = I - 11^T/n."""
    if not isinstance(M, nc.Tensor):
        return M - M.mean(axis=0, keepdims=True) - M.mean(axis=1, keepdims=True) + M.mean()
    return M - nc.mean(M, axis=0, keepdims=True) - nc.mean(M, axis=1, keepdims=True) + nc.mean(M)


@lru_cache(maxsize=8)
def _centered_gram_cached(key: bytes, n: int, d: int, sigma: Optional[float]) -> np.ndarray:
    X = np.frombuffer(key, dtype=np.float64).reshape(n, d)
    return _center(gaussian_gram(X, sigma))


def hsic(R, T, cfg: HsicConfig = HsicConfig()):
    """Biased HSIC, trace(K H M H) / (n-1)^2, differentiable in R (and T)."""
    R = _as_matrix(R)
    T = _as_matrix(T)
    n = nc.value_of(R).shape[0]
    if n < 2:
        raise ValueError("hsic needs at least 2 samples")
    if nc.value_of(T).shape[0] != n:
        raise nc.ShapeError(f"hsic: {n} representation rows but {nc.value_of(T).shape[0]} dosages")
    denom = (n - 1) ** 2 if cfg.normalization == "n-1" else n ** 2
    # trace(K H M H) = <K, H M H>; center whichever side is constant
    if isinstance(T, nc.Tensor) and not isinstance(R, nc.Tensor):
        R, T = T, R
        cfg = HsicConfig(cfg.sigma_t, cfg.sigma_r, cfg.normalization)
    K = gaussian_gram(R, cfg.sigma_r)
    if isinstance(T, nc.Tensor):
        Mc = _center(gaussian_gram(T, cfg.sigma_t))
    else:
        Tc = np.ascontiguousarray(T, dtype=np.float64)
        Mc = _centered_gram_cached(Tc.tobytes(), Tc.shape[0], Tc.shape[1], cfg.sigma_t)
    return nc.sum(K * Mc) / denom


# -- optimal transport --------------------------------------------------------

@dataclass
class SinkhornResult:
    plan: np.ndarray
    cost: float
    n_iter: int
    converged: bool


_sinkhorn_misses = 0


def _lse(M, axis):
    mx = M.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(C: np.ndarray, epsilon: float, max_iter: int = 200, tol: float = 1e-9) -> SinkhornResult:
    """Entropic OT between uniform measures, cost <P, C> + eps * KL(P || ab^T).

    Uses plain kernel scaling when exp(-C/eps) is safely representable and the
    log-domain updates otherwise.
    """
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    loga, logb = -np.log(n), -np.log(m)
    converged = False
    it = 0
    span = C.max() - C.min()
    if span / epsilon < 300:
        K = np.exp(-(C - C.min()) / epsilon)
        a = np.full(n, 1.0 / n)
        b = np.full(m, 1.0 / m)
        v = np.ones(m)
        for it in range(1, max_iter + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if it % 5 == 0 or it == max_iter:
                err = np.abs(u * (K @ v) - a).sum()
                if err < tol:
                    converged = True
                    break
        P = u[:, None] * K * v[None, :]
    else:
        f = np.zeros(n)
        g = np.zeros(m)
        for it in range(1, max_iter + 1):
            f = -epsilon * _lse((g[None, :] - C) / epsilon + logb, axis=1)
            g = -epsilon * _lse((f[:, None] - C) / epsilon + loga, axis=0)
            if it % 5 == 0 or it == max_iter:
                P = np.exp((f[:, None] + g[None, :] - C) / epsilon + loga + logb)
                if np.abs(P.sum(axis=1) - 1.0 / n).sum() < tol:
                    converged = True
                    break
        P = np.exp((f[:, None] + g[None, :] - C) / epsilon + loga + logb)
    if not converged:
        # training calls this every step; only the first miss is worth a warning
        global _sinkhorn_misses
        _sinkhorn_misses += 1
        level = logging.WARNING if _sinkhorn_misses == 1 else logging.DEBUG
        log.log(level, "sinkhorn: no convergence after %d iterations (eps=%g)", max_iter, epsilon)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(P > 0, P * (np.log(P) - loga - logb), 0.0).sum()
    cost = float((P * C).sum() + epsilon * kl)
    return SinkhornResult(P, cost, it, converged)


def _entropic_ot(C, cfg: WassersteinConfig):
    # At the optimal plan P*, the derivative of the cost with respect to the
    # ground-cost matrix is P* itself, so the plan is held fixed on the tape.
    res = sinkhorn(nc.value_of(C), cfg.epsilon, cfg.max_iter, cfg.tol)
    linear = float((res.plan * nc.value_of(C)).sum())
    return nc.sum(C * res.plan) + (res.cost - linear)


def sinkhorn_cost(A, B, cfg: WassersteinConfig = WassersteinConfig()):
    """Differentiable entropic OT cost between two uniform point clouds."""
    return _entropic_ot(sq_distances(A, B), cfg)


def wasserstein_independence(R, T, cfg: WassersteinConfig = WassersteinConfig(),
                             rng: Optional[np.random.Generator] = None,
                             perm: Optional[np.ndarray] = None):
    """OT cost between {(r_i, t_i)} and {(r_i, t_pi(i))} for a fresh permutation pi.

    The ground cost is divided by its batch mean (held constant, like the HSIC
    bandwidths) so that ``epsilon`` is relative to the typical transport cost
    whatever the representation width.
    """
    R = _as_matrix(R)
    t = np.asarray(nc.value_of(T), dtype=float).reshape(-1)
    n = nc.value_of(R).shape[0]
    if n < 2:
        raise ValueError("wasserstein_independence needs at least 2 samples")
    if t.shape[0] != n:
        raise nc.ShapeError(f"wasserstein: {n} representation rows but {t.shape[0]} dosages")
    sd = t.std()
    t = (t - t.mean()) / sd if sd > 0 else t - t.mean()
    if perm is None:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        perm = rng.permutation(n)
    A = nc.concatenate([R, t[:, None]], axis=1)
    B = nc.concatenate([R, t[perm][:, None]], axis=1)
    C = sq_distances(A, B)
    scale = cfg.cost_scale
    if scale is None:
        scale = float(np.mean(nc.value_of(C)))
        scale = scale if scale > 0 else 1.0
    return _entropic_ot(C * (1.0 / scale), cfg)
