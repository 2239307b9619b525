"""Degree-2 truncated-power spline bases on the dosage interval [0, 1].

The basis ``[1, s, s^2, (s - k_1)_+^2, ..., (s - k_K)_+^2]`` spans the same
space as a degree-2 B-spline with the same knots, and every element is C^1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import numcore as nc


@dataclass(frozen=True)
class SplineBasis:
    knots: Tuple[float, ...] = (1 / 3, 2 / 3)
    degree: int = 2

    def __post_init__(self):
        if self.degree != 2:
            raise ValueError("only degree-2 bases are supported")
        k = np.asarray(self.knots, dtype=float)
        if np.any(k <= 0) or np.any(k >= 1):
            raise ValueError(f"knots must lie strictly inside (0, 1): {self.knots}")
        if np.any(np.diff(k) <= 0):
            raise ValueError(f"knots must be strictly increasing: {self.knots}")

    @classmethod
    def equally_spaced(cls, n_knots: int) -> "SplineBasis":
        """``n_knots`` interior knots at i/(n_knots+1)."""
        return cls(tuple(i / (n_knots + 1) for i in range(1, n_knots + 1)))

    @property
    def dim(self) -> int:
        return self.degree + 1 + len(self.knots)


def _check_range(s):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or np.any(s > 1) or not np.isfinite(s).all():
        raise ValueError("dosage must lie in [0, 1]; clamp before evaluating the basis")
    return s


def eval_basis(b: SplineBasis, s) -> np.ndarray:
    """Basis values; a scalar gives shape (L,), a vector of n dosages gives (n, L)."""
    s = _check_range(s)
    flat = np.atleast_1d(s)[:, None]
    k = np.asarray(b.knots)[None, :]
    out = np.concatenate([np.ones_like(flat), flat, flat ** 2, np.maximum(flat - k, 0.0) ** 2], axis=1)
    return out[0] if s.ndim == 0 else out


def eval_basis_derivative(b: SplineBasis, s) -> np.ndarray:
    s = _check_range(s)
    flat = np.atleast_1d(s)[:, None]
    k = np.asarray(b.knots)[None, :]
    out = np.concatenate([np.zeros_like(flat), np.ones_like(flat), 2 * flat, 2 * np.maximum(flat - k, 0.0)], axis=1)
    return out[0] if s.ndim == 0 else out


def basis_op(b: SplineBasis, s):
    """Basis matrix (n, L) as a tape primitive, differentiable through ``s``."""
    sv = nc.value_of(s).reshape(-1)
    out = eval_basis(b, sv)
    if not isinstance(s, nc.Tensor):
        return out
    deriv = eval_basis_derivative(b, sv)
    shape = nc.value_of(s).shape
    return nc.custom("spline_basis", out, (s,), lambda g: ((g * deriv).sum(axis=1).reshape(shape),))
