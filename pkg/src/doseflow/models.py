"""Representation network, outcome heads, propensity head and the GPS baseline.

Parameters live in a flat ``{name: ndarray}`` store.  Every forward function
takes that store explicitly, so passing tape variables gives a differentiable
graph and passing plain arrays gives a fast numpy evaluation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import numcore as nc
from .basis import SplineBasis, basis_op

log = logging.getLogger(__name__)

ModelParams = Dict[str, np.ndarray]

ARCHITECTURES = ("mlp", "drnet", "vcnet")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    n_covariates: int
    hidden: int = 50
    n_treatments: int = 1
    mlp_layers: int = 4
    drnet_bins: int = 5
    vc_knots: Tuple[float, ...] = (1 / 3, 2 / 3)
    propensity_bins: int = 0  # 0 disables the propensity head
    tr_knots: int = 0  # 0 disables the targeted-regularization perturbation

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.architecture == "mlp" and (self.propensity_bins or self.tr_knots):
            raise ValueError("the MLP baseline has no representation to attach a propensity head to")
        if self.tr_knots and not self.propensity_bins:
            raise ValueError("targeted regularization needs a propensity head")

    @property
    def vc_basis(self) -> SplineBasis:
        return SplineBasis(tuple(self.vc_knots))

    @property
    def tr_basis(self) -> Optional[SplineBasis]:
        return SplineBasis.equally_spaced(self.tr_knots) if self.tr_knots else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vc_knots"] = list(self.vc_knots)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["vc_knots"] = tuple(d.get("vc_knots", (1 / 3, 2 / 3)))
        return cls(**d)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def head_param_count(cfg: ModelConfig) -> int:
    """Parameters of one plain 2-layer regression head on (representation, s)."""
    p, q = cfg.hidden + 1, cfg.hidden
    return p * q + q + q + 1


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params: ModelParams = {}
    q = cfg.hidden
    if cfg.architecture == "mlp":
        fan_in = cfg.n_covariates + 1
        for i in range(cfg.mlp_layers):
            params[f"mlp.W{i}"] = _glorot(rng, fan_in, q, (fan_in, q))
            params[f"mlp.b{i}"] = np.zeros(q)
            fan_in = q
        params["mlp.Wout"] = _glorot(rng, q, 1, (q, 1))
        params["mlp.bout"] = np.zeros(1)
        return params

    params["rep.W1"] = _glorot(rng, cfg.n_covariates, q, (cfg.n_covariates, q))
    params["rep.b1"] = np.zeros(q)
    params["rep.W2"] = _glorot(rng, q, q, (q, q))
    params["rep.b2"] = np.zeros(q)
    p = q + 1
    for w in range(cfg.n_treatments):
        if cfg.architecture == "vcnet":
            L = cfg.vc_basis.dim
            params[f"head{w}.W1"] = _glorot(rng, p, q, (p, L * q))
            params[f"head{w}.b1"] = np.zeros((L, q))
            params[f"head{w}.W2"] = _glorot(rng, q, 1, (q, L))
            params[f"head{w}.b2"] = np.zeros((L, 1))
        else:
            for b in range(cfg.drnet_bins):
                params[f"head{w}.bin{b}.W1"] = _glorot(rng, p, q, (p, q))
                params[f"head{w}.bin{b}.b1"] = np.zeros(q)
                params[f"head{w}.bin{b}.W2"] = _glorot(rng, q, 1, (q, 1))
                params[f"head{w}.bin{b}.b2"] = np.zeros(1)
    if cfg.propensity_bins:
        params["prop.W"] = _glorot(rng, q, cfg.propensity_bins, (q, cfg.propensity_bins))
        params["prop.b"] = np.zeros(cfg.propensity_bins)
    if cfg.tr_knots:
        params["tr.a"] = np.zeros(cfg.tr_basis.dim)
    return params


# -- building blocks ----------------------------------------------------------

def represent(params: Mapping, X):
    """Two ELU layers mapping covariates to the representation space."""
    x = np.asarray(X, dtype=float)
    if x.ndim != 2 or x.shape[1] != nc.value_of(params["rep.W1"]).shape[0]:
        raise nc.ShapeError(f"represent: expected (n, {nc.value_of(params['rep.W1']).shape[0]}) covariates, got {x.shape}")
    h = nc.elu(nc.matmul(x, params["rep.W1"]) + params["rep.b1"])
    return nc.elu(nc.matmul(h, params["rep.W2"]) + params["rep.b2"])


def _column(s):
    return nc.reshape(s, (-1, 1)) if isinstance(s, nc.Tensor) else np.asarray(s, dtype=float).reshape(-1, 1)


def _varying_linear(z, basis, W, b, out_dim):
    """Linear layer whose weights and bias are spline functions of the dosage.

    ``W`` is (p, L*out_dim) and ``b`` is (L, out_dim); the effective weight for
    row i is sum_l basis[i, l] * W[:, l-th block].
    """
    n = nc.value_of(basis).shape[0]
    L = nc.value_of(basis).shape[1]
    zw = nc.reshape(nc.matmul(z, W), (n, L, out_dim))
    mixed = nc.sum(zw * nc.reshape(basis, (n, L, 1)), axis=1)
    return mixed + nc.matmul(basis, b)


def predict_vcnet(params: Mapping, prefix: str, r, s, basis: SplineBasis):
    """Varying-coefficient head evaluated on representation rows ``r`` at dosages ``s``."""
    s_col = _column(s)
    B = basis_op(basis, s_col)
    z = nc.concatenate([r, s_col], axis=1)
    hidden = nc.value_of(params[f"{prefix}.b1"]).shape[1]
    h = nc.elu(_varying_linear(z, B, params[f"{prefix}.W1"], params[f"{prefix}.b1"], hidden))
    out = _varying_linear(h, B, params[f"{prefix}.W2"], params[f"{prefix}.b2"], 1)
    return nc.reshape(out, (-1,))


def drnet_bin(s, n_bins: int = 5) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.minimum(np.floor(n_bins * s), n_bins - 1).astype(int)


def predict_drnet(params: Mapping, prefix: str, r, s, n_bins: int = 5):
    """Route each row to the head of its dosage bin and feed it (r, s)."""
    s_col = _column(s)
    z = nc.concatenate([r, s_col], axis=1)
    idx = drnet_bin(nc.value_of(s_col).reshape(-1), n_bins)
    out = None
    for b in range(n_bins):
        rows = idx == b
        if not rows.any():
            continue
        p = f"{prefix}.bin{b}"
        h = nc.elu(nc.matmul(z, params[f"{p}.W1"]) + params[f"{p}.b1"])
        y = nc.reshape(nc.matmul(h, params[f"{p}.W2"]) + params[f"{p}.b2"], (-1,))
        term = y * rows.astype(float)
        out = term if out is None else out + term
    return out


def propensity_log_density(params: Mapping, r, s, n_bins: int):
    """Log of the piecewise-constant conditional density p(s | r) at the observed s."""
    logits = nc.matmul(r, params["prop.W"]) + params["prop.b"]
    logp = nc.log_softmax(logits, axis=1)
    s_flat = np.asarray(nc.value_of(s), dtype=float).reshape(-1)
    onehot = np.eye(n_bins)[np.minimum(np.floor(n_bins * s_flat), n_bins - 1).astype(int)]
    return nc.sum(logp * onehot, axis=1) + np.log(n_bins)


def propensity_density(params: Mapping, r, s, n_bins: int):
    """Density value: softmax probability of s's bin divided by the bin width."""
    return nc.exp(propensity_log_density(params, r, s, n_bins))


def perturbation(params: Mapping, basis: SplineBasis, s):
    """Targeted-regularization perturbation sum_k a_k psi_k(s)."""
    B = basis_op(basis, _column(s))
    return nc.reshape(nc.matmul(B, nc.reshape(params["tr.a"], (-1, 1))), (-1,))


# -- full model ---------------------------------------------------------------

@dataclass
class Forward:
    """Intermediate quantities of one forward pass."""

    outcome: object
    representation: object = None
    log_density: object = None
    density: object = None
    perturbation: object = None


class DoseResponseNet:
    """Dispatches the configured architecture over a parameter store."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, rng) -> ModelParams:
        return init_params(self.cfg, rng)

    def outcome_from_representation(self, params, r, s, w=None):
        cfg = self.cfg
        if cfg.architecture == "vcnet":
            head = lambda prefix: predict_vcnet(params, prefix, r, s, cfg.vc_basis)  # noqa: E731
        else:
            head = lambda prefix: predict_drnet(params, prefix, r, s, cfg.drnet_bins)  # noqa: E731
        if cfg.n_treatments == 1:
            return head("head0")
        w = np.zeros(nc.value_of(r).shape[0], dtype=int) if w is None else np.asarray(w)
        out = None
        for k in range(cfg.n_treatments):
            rows = w == k
            if not rows.any():
                continue
            term = head(f"head{k}") * rows.astype(float)
            out = term if out is None else out + term
        return out

    def forward(self, params, X, s, w=None) -> Forward:
        cfg = self.cfg
        if cfg.architecture == "mlp":
            h = nc.concatenate([np.asarray(X, dtype=float), _column(s)], axis=1)
            for i in range(cfg.mlp_layers):
                h = nc.elu(nc.matmul(h, params[f"mlp.W{i}"]) + params[f"mlp.b{i}"])
            out = nc.reshape(nc.matmul(h, params["mlp.Wout"]) + params["mlp.bout"], (-1,))
            return Forward(outcome=out)
        r = represent(params, X)
        fw = Forward(outcome=self.outcome_from_representation(params, r, s, w), representation=r)
        if cfg.propensity_bins:
            fw.log_density = propensity_log_density(params, r, s, cfg.propensity_bins)
            fw.density = nc.exp(fw.log_density)
        if cfg.tr_knots:
            fw.perturbation = perturbation(params, cfg.tr_basis, s)
        return fw

    def predict(self, params, X, s, w=None, density_floor: float = 1e-6) -> np.ndarray:
        """Outcome estimate; TR models add the perturbation over the clipped density."""
        fw = self.forward(params, X, s, w)
        out = np.asarray(nc.value_of(fw.outcome))
        if self.cfg.tr_knots:
            dens = np.maximum(nc.value_of(fw.density), density_floor)
            out = out + nc.value_of(fw.perturbation) / dens
        return out


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "doseflow-params/1"


def save_checkpoint(path, cfg: ModelConfig, params: Mapping[str, np.ndarray], extra: Optional[dict] = None):
    """JSON checkpoint: ``params`` maps name -> {shape, row-major values}."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": cfg.to_dict(),
        "params": {k: {"shape": list(v.shape), "values": np.asarray(v, dtype=float).ravel().tolist()}
                   for k, v in params.items()},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Tuple[ModelConfig, ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    params = {k: np.asarray(v["values"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    return ModelConfig.from_dict(doc["model"]), params, doc.get("extra", {})


# -- generalized propensity score baseline ------------------------------------

def _solve_least_squares(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    gram = A.T @ A
    rhs = A.T @ b
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        log.warning("%s: singular design matrix; adding ridge jitter 1e-8 to the diagonal", what)
        return np.linalg.solve(gram + 1e-8 * np.eye(gram.shape[0]), rhs)


@dataclass
class GpsModel:
    """Hirano-Imbens estimator with a linear-Gaussian treatment model."""

    treatment_coef: np.ndarray
    sigma2: float
    outcome_coef: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def gps(self, X, s) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = np.column_stack([np.ones(len(X)), X]) @ self.treatment_coef
        return np.exp(-0.5 * (np.asarray(s) - mu) ** 2 / self.sigma2) / np.sqrt(2 * np.pi * self.sigma2)

    @staticmethod
    def design(s, R) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        R = np.asarray(R, dtype=float)
        return np.column_stack([np.ones_like(s), s, s ** 2, R, R ** 2, s * R])

    def predict(self, X, s, w=None) -> np.ndarray:
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(X),))
        return self.design(s, self.gps(X, s)) @ self.outcome_coef

    def dose_response(self, X, grid) -> np.ndarray:
        """Average stage-2 prediction over units at each dosage in ``grid``."""
        return np.array([self.predict(X, np.full(len(X), g)).mean() for g in grid])


def fit_gps(X, s, y) -> GpsModel:
    X = np.asarray(X, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones(len(X)), X])
    if len(X) <= max(A.shape[1], 6):
        raise ValueError(f"GPS needs more units than coefficients (n={len(X)}, p={A.shape[1]})")
    beta = _solve_least_squares(A, s, "gps treatment model")
    resid = s - A @ beta
    sigma2 = float(resid @ resid / (len(X) - A.shape[1]))
    sigma2 = max(sigma2, 1e-12)
    model = GpsModel(beta, sigma2)
    R = model.gps(X, s)
    model.outcome_coef = _solve_least_squares(GpsModel.design(s, R), y, "gps outcome model")
    return model
