"""Seeded benchmark generators with noiseless outcome oracles.

All randomness comes from numpy's counter-based Philox bit generator, so a
generator is a pure function of its inputs and seed.  Dosages live strictly
inside (0, 1).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

NOISE_SD = 0.5  # N(0, 0.25) is read as variance 0.25
DOSAGE_EPS = 1e-6
NEWS_SW_CAP = 100.0
IHDP_I = tuple(range(16, 26))  # 1-based covariate indices
IHDP_J = (4, 7, 8, 9, 10, 11, 12, 13, 14, 15)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


# -- oracles ------------------------------------------------------------------
# Oracles are small picklable objects so datasets can cross process boundaries.

@dataclass(frozen=True)
class SyntheticOracle:
    def __call__(self, X, s, w=None):
        X = np.atleast_2d(X)
        s = np.asarray(s, dtype=float)
        x1, x3, x4, x6 = X[:, 0], X[:, 2], X[:, 3], X[:, 5]
        return np.cos(2 * np.pi * (s - 0.5)) * (
            s ** 2 + 4 * np.maximum(x1, x6) ** 3 / (1 + 2 * x3 ** 2) * np.sin(x4))


@dataclass(frozen=True)
class IhdpOracle:
    c1: float
    c2: float

    def __call__(self, X, s, w=None):
        X = np.atleast_2d(X)
        s = np.asarray(s, dtype=float)
        J = [j - 1 for j in IHDP_J]
        x1, x2, x3, x5, x6 = X[:, 0], X[:, 1], X[:, 2], X[:, 4], X[:, 5]
        mod = np.tanh(5 * (X[:, J].mean(axis=1) - self.c1)) + np.exp(
            0.2 * (x1 - x6) / (0.5 + np.minimum(np.minimum(x2, x3), x5)))
        return np.sin(3 * np.pi * s) / (1.2 - s) * mod


@dataclass(frozen=True)
class NewsOracle:
    v1: Tuple[float, ...]
    v2: Tuple[float, ...]
    v3: Tuple[float, ...]

    def ratio(self, X):
        X = np.atleast_2d(X)
        p1 = X @ np.asarray(self.v1)
        p2 = X @ np.asarray(self.v2)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(p2 / p1)
        return np.where(p1 == 0, np.inf, r)

    def base(self, X):
        """clip(y', -2, 2) with y' = exp(|x.v2 / x.v1| - 0.3); y' > 0 so only the top clip binds."""
        return np.exp(np.minimum(self.ratio(X) - 0.3, np.log(2.0)))

    def __call__(self, X, s, w=None):
        X = np.atleast_2d(X)
        s = np.asarray(s, dtype=float)
        p3 = X @ np.asarray(self.v3)
        return 2 * (self.base(X) + 20 * p3 * 4 * (s - 0.5) ** 2 * np.sin(np.pi * s / 2))


# -- dataset ------------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    w: np.ndarray
    s: np.ndarray
    y: np.ndarray
    oracle: object
    name: str = ""
    seed: Optional[int] = None
    dosage_noise: Optional[np.ndarray] = None
    outcome_noise: Optional[np.ndarray] = None
    covariate_source: str = "generated"

    def __post_init__(self):
        n = len(self.X)
        for field_name in ("w", "s", "y"):
            if len(getattr(self, field_name)) != n:
                raise ValueError(f"dataset field {field_name!r} has {len(getattr(self, field_name))} rows, expected {n}")
        if np.any(self.s <= 0) or np.any(self.s >= 1):
            raise ValueError("dosages must lie strictly inside (0, 1)")

    def __len__(self):
        return len(self.X)

    def true_outcome(self, X=None, s=None, w=None):
        X = self.X if X is None else X
        s = self.s if s is None else s
        return self.oracle(X, s, w)

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(self.X[idx], self.w[idx], self.s[idx], self.y[idx], self.oracle, self.name, self.seed,
                       pick(self.dosage_noise), pick(self.outcome_noise), self.covariate_source)

    def to_csv(self, path):
        d = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow([f"x{i + 1}" for i in range(d)] + ["w", "s", "y"])
            for row, w, s, y in zip(self.X, self.w, self.s, self.y):
                out.writerow([repr(float(v)) for v in row] + [int(w), repr(float(s)), repr(float(y))])


def gen_synthetic(n: int, seed: int) -> Dataset:
    """Six uniform covariates; confounded dosage through x1..x5."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 6))
    dosage_noise = rng.normal(0.0, NOISE_SD, size=n)
    outcome_noise = rng.normal(0.0, NOISE_SD, size=n)
    s = np.clip(sigmoid(synthetic_logit(X) + dosage_noise), DOSAGE_EPS, 1 - DOSAGE_EPS)
    oracle = SyntheticOracle()
    y = oracle(X, s) + outcome_noise
    return Dataset(X, np.zeros(n, dtype=int), s, y, oracle, "synthetic", seed, dosage_noise, outcome_noise)


def synthetic_logit(X) -> np.ndarray:
    """Noiseless pre-sigmoid dosage for the synthetic benchmark."""
    X = np.atleast_2d(X)
    x1, x2, x3, x4, x5 = (X[:, i] for i in range(5))
    return ((10 * np.sin(np.maximum(np.maximum(x1, x2), x3)) + np.maximum(np.maximum(x3, x4), x5) ** 3)
            / (1 + (x1 + x5) ** 2)
            + np.sin(0.5 * x3) * (1 + np.exp(x4 - 0.5 * x3))
            + x3 ** 2 + 2 * np.sin(x4) + 2 * x5 - 6.5)


def ihdp_centers(X) -> Tuple[float, float]:
    """Empirical means of the J- and I-group covariate averages."""
    J = [j - 1 for j in IHDP_J]
    I = [i - 1 for i in IHDP_I]  # noqa: E741
    return float(X[:, J].mean(axis=1).mean()), float(X[:, I].mean(axis=1).mean())


def ihdp_logit(X, c2: float) -> np.ndarray:
    X = np.atleast_2d(X)
    I = [i - 1 for i in IHDP_I]  # noqa: E741
    x1, x2, x3, x5, x6 = X[:, 0], X[:, 1], X[:, 2], X[:, 4], X[:, 5]
    hi = np.maximum(np.maximum(x3, x5), x6)
    lo = np.minimum(np.minimum(x3, x5), x6)
    return (2 * x1 / (1 + x2) + 2 * hi / (0.2 + lo)
            + 2 * np.tanh(5 * (X[:, I].mean(axis=1) - c2)) - 4)


def gen_ihdp_continuous(covariates, seed: int, source: str = "csv") -> Dataset:
    """Continuous-dosage IHDP variant on 25 covariates scaled to [0, 1]."""
    X = np.asarray(covariates, dtype=float)
    if X.ndim != 2 or X.shape[1] != 25:
        raise ValueError(f"IHDP needs a 25-column covariate matrix, got shape {X.shape}")
    if np.any(X < 0) or np.any(X > 1):
        raise ValueError("IHDP covariates must be scaled to [0, 1] (see minmax_scale_continuous)")
    n = len(X)
    rng = make_rng(seed)
    c1, c2 = ihdp_centers(X)
    dosage_noise = rng.normal(0.0, NOISE_SD, size=n)
    outcome_noise = rng.normal(0.0, NOISE_SD, size=n)
    s = np.clip(sigmoid(ihdp_logit(X, c2) + dosage_noise), DOSAGE_EPS, 1 - DOSAGE_EPS)
    oracle = IhdpOracle(c1, c2)
    y = oracle(X, s) + outcome_noise
    return Dataset(X.copy(), np.zeros(n, dtype=int), s, y, oracle, "ihdp", seed, dosage_noise, outcome_noise, source)


def ihdp_surrogate_covariates(n: int = 747, seed: int = 0) -> np.ndarray:
    """Stand-in for the IHDP covariates: 6 uniform columns then 19 Bernoulli columns."""
    rng = make_rng(seed)
    cont = rng.uniform(0.0, 1.0, size=(n, 6))
    p = rng.uniform(0.1, 0.9, size=19)
    binary = (rng.uniform(size=(n, 19)) < p).astype(float)
    return np.hstack([cont, binary])


def minmax_scale_continuous(X) -> np.ndarray:
    """Rescale every non-binary column to [0, 1]; 0/1 columns are left alone."""
    X = np.array(X, dtype=float)
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.isin(col, (0.0, 1.0)).all():
            continue
        lo, hi = col.min(), col.max()
        X[:, j] = (col - lo) / (hi - lo) if hi > lo else 0.0
    return X


def news_covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Sparse Poisson(0.5) counts with at least one nonzero word per document."""
    X = rng.poisson(0.5, size=(n, d)).astype(float)
    empty = np.flatnonzero(X.sum(axis=1) == 0)
    X[empty, rng.integers(0, d, size=len(empty))] = 1.0
    return X


def news_concentration(oracle: NewsOracle, X) -> np.ndarray:
    """s_w = max(1, |2 x.v2 / x.v1|), capped against x.v1 -> 0."""
    return np.minimum(np.maximum(1.0, 2 * oracle.ratio(X)), NEWS_SW_CAP)


def gen_news(n: int, vocab: int = 50, seed: int = 0, covariates=None) -> Dataset:
    """News-style benchmark; pass ``covariates`` to use real word counts."""
    if n < 1 or vocab < 2:
        raise ValueError("gen_news needs n >= 1 and vocab >= 2")
    rng = make_rng(seed)
    vs = []
    for _ in range(3):
        v = rng.normal(size=vocab)
        vs.append(tuple(v / np.linalg.norm(v)))
    oracle = NewsOracle(*vs)
    if covariates is None:
        X = news_covariates(n, vocab, rng)
        source = "poisson-surrogate"
    else:
        X = np.asarray(covariates, dtype=float)
        if X.shape != (n, vocab):
            raise ValueError(f"covariates must have shape ({n}, {vocab}), got {X.shape}")
        source = "csv"
    sw = news_concentration(oracle, X)
    s = np.clip(rng.beta(2.0, sw), DOSAGE_EPS, 1 - DOSAGE_EPS)
    outcome_noise = rng.normal(0.0, NOISE_SD, size=n)
    y = oracle(X, s) + outcome_noise
    return Dataset(X, np.zeros(n, dtype=int), s, y, oracle, "news", seed, None, outcome_noise, source)


# -- splitting ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, ...] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) < 2 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"split ratios must be positive, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


def split_sizes(n: int, ratios: Sequence[float]):
    sizes = [int(np.floor(n * r + 1e-9)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if min(sizes) < 1:
        raise ValueError(f"n={n} is too small to give every split at least one row (sizes {sizes})")
    return sizes


def split_indices(n: int, spec: SplitSpec):
    perm = make_rng(spec.seed).permutation(n)
    bounds = np.cumsum(split_sizes(n, spec.ratios))[:-1]
    return [np.sort(part) for part in np.split(perm, bounds)]


def split(ds: Dataset, spec: SplitSpec = SplitSpec()):
    """Seeded disjoint partition; returns one Dataset per ratio."""
    return tuple(ds.subset(idx) for idx in split_indices(len(ds), spec))


# -- CSV ingestion ------------------------------------------------------------

@dataclass
class CovariateTable:
    values: np.ndarray
    header: Optional[list] = None
    stats: dict = field(default_factory=dict)


class CsvParseError(ValueError):
    pass


def load_covariates_csv(path) -> CovariateTable:
    """Numeric CSV (optional header) to an n x d matrix with per-column stats."""
    rows = []
    header = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1 and not rows:
                    header = [c.strip() for c in row]
                    continue
                for col, c in enumerate(row, start=1):
                    try:
                        float(c)
                    except ValueError:
                        raise CsvParseError(f"{path}: non-numeric cell {c!r} at row {lineno}, column {col}") from None
            width = len(header) if header is not None and not rows else (len(rows[0]) if rows else len(vals))
            if len(vals) != width:
                raise CsvParseError(f"{path}: row {lineno} has {len(vals)} columns, expected {width}")
            rows.append(vals)
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=float)
    stats = {"n": X.shape[0], "d": X.shape[1], "min": X.min(axis=0).tolist(),
             "max": X.max(axis=0).tolist(), "mean": X.mean(axis=0).tolist()}
    log.info("loaded %s: %d rows x %d columns", path, X.shape[0], X.shape[1])
    return CovariateTable(X, header, stats)
