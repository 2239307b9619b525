"""MISE, AMSE and pairwise effect error against a generator's outcome oracle."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

Predictor = Callable[..., np.ndarray]  # predict(X, s, w) -> outcomes


@dataclass(frozen=True)
class DosageGrid:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 1 or p.shape != w.shape or p.size == 0:
            raise ValueError("grid points and weights must be matching nonempty vectors")
        if np.any(p <= 0) or np.any(p >= 1) or np.any(np.diff(p) <= 0):
            raise ValueError("grid points must be strictly increasing inside (0, 1)")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("grid weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, size: int = 65, lo: float = 0.01, hi: float = 0.99) -> "DosageGrid":
        return cls(np.linspace(lo, hi, size), np.full(size, 1.0 / size))

    @classmethod
    def from_samples(cls, s) -> "DosageGrid":
        """Monte Carlo grid over observed dosage draws (ties merged into weights)."""
        pts, counts = np.unique(np.asarray(s, dtype=float), return_counts=True)
        return cls(pts, counts / counts.sum())

    def __len__(self):
        return len(self.points)


def response_errors(predict: Predictor, X, oracle, grid: DosageGrid, w: int = 0) -> np.ndarray:
    """(N, G) matrix of true minus predicted outcomes for every unit and grid dosage."""
    X = np.asarray(X, dtype=float)
    N, G = len(X), len(grid)
    Xr = np.repeat(X, G, axis=0)
    sr = np.tile(grid.points, N)
    wr = np.full(N * G, w, dtype=int)
    truth = np.asarray(oracle(Xr, sr, wr), dtype=float)
    pred = np.asarray(predict(Xr, sr, wr), dtype=float)
    return (truth - pred).reshape(N, G)


def _mise_amse_from_errors(err: np.ndarray, weights: np.ndarray) -> Tuple[float, float]:
    # MISE is assembled as AMSE plus the (nonnegative) per-dosage variance so
    # that AMSE <= MISE holds in floating point, not just mathematically.
    bias = err.mean(axis=0)
    spread = ((err - bias) ** 2).mean(axis=0)
    bias2 = bias * bias
    return float(np.sum(weights * (bias2 + spread))), float(np.sum(weights * bias2))


def mise(predict: Predictor, X, oracle, grid: DosageGrid = None, treatments: Sequence[int] = (0,)) -> float:
    grid = DosageGrid.uniform() if grid is None else grid
    vals = [_mise_amse_from_errors(response_errors(predict, X, oracle, grid, w), grid.weights)[0] for w in treatments]
    return float(np.mean(vals))


def amse(predict: Predictor, X, oracle, grid: DosageGrid = None, treatments: Sequence[int] = (0,)) -> float:
    grid = DosageGrid.uniform() if grid is None else grid
    vals = [_mise_amse_from_errors(response_errors(predict, X, oracle, grid, w), grid.weights)[1] for w in treatments]
    return float(np.mean(vals))


def pairwise_effect_error(predict: Predictor, X, oracle, t1: Tuple[int, float], t2: Tuple[int, float]) -> float:
    """Mean over units of (estimated contrast - true contrast)^2 between two treatments."""
    if tuple(t1) == tuple(t2):
        raise ValueError("t1 and t2 must differ")
    for _, s in (t1, t2):
        if not 0 < s < 1:
            raise ValueError(f"dosage {s} outside (0, 1)")
    X = np.asarray(X, dtype=float)
    n = len(X)

    def at(t):
        w = np.full(n, t[0], dtype=int)
        s = np.full(n, float(t[1]))
        return np.asarray(predict(X, s, w), dtype=float), np.asarray(oracle(X, s, w), dtype=float)

    f1, m1 = at(t1)
    f2, m2 = at(t2)
    return float(np.mean(((f1 - f2) - (m1 - m2)) ** 2))


REPORT_COLUMNS = ("dataset", "method", "seed", "n", "mise", "sqrt_mise", "amse", "sqrt_amse", "pairwise")


@dataclass
class EvalReport:
    mise: float
    amse: float
    pairwise: Dict[Tuple[float, float], float] = field(default_factory=dict)
    n: int = 0
    seed: Optional[int] = None
    model: str = ""
    dataset: str = ""

    def __post_init__(self):
        vals = [self.mise, self.amse, *self.pairwise.values()]
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"evaluation produced invalid metrics: {vals}")

    @property
    def sqrt_mise(self) -> float:
        return math.sqrt(self.mise)

    @property
    def sqrt_amse(self) -> float:
        return math.sqrt(self.amse)

    def row(self) -> list:
        """CSV row in REPORT_COLUMNS order; floats via repr for exact round-trips."""
        pw = ";".join(f"{a:g}-{b:g}:{v!r}" for (a, b), v in sorted(self.pairwise.items()))
        return [self.dataset, self.model, "" if self.seed is None else self.seed, self.n,
                repr(self.mise), repr(self.sqrt_mise), repr(self.amse), repr(self.sqrt_amse), pw]


def evaluate(predict: Predictor, X, oracle, grid: DosageGrid = None,
             pairs: Sequence[Tuple[float, float]] = ((0.25, 0.75),), treatments: Sequence[int] = (0,),
             **meta) -> EvalReport:
    grid = DosageGrid.uniform() if grid is None else grid
    per_w = [_mise_amse_from_errors(response_errors(predict, X, oracle, grid, w), grid.weights) for w in treatments]
    m = float(np.mean([a for a, _ in per_w]))
    a = float(np.mean([b for _, b in per_w]))
    pw = {(t1, t2): float(np.mean([pairwise_effect_error(predict, X, oracle, (w, t1), (w, t2)) for w in treatments]))
          for t1, t2 in pairs}
    return EvalReport(m, a, pw, n=len(X), **meta)


def write_reports(path, reports: Sequence[EvalReport], append: bool = False):
    path = Path(path)
    exists = append and path.exists() and path.stat().st_size > 0
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.writer(fh)
        if not exists:
            out.writerow(REPORT_COLUMNS)
        for r in reports:
            out.writerow(r.row())
