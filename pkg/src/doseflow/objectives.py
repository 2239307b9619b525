"""Training losses: factual MSE, IPM-regularized, propensity-score and targeted regularization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .balance import HsicConfig, WassersteinConfig, hsic, wasserstein_independence
from .models import DoseResponseNet

log = logging.getLogger(__name__)

KINDS = ("factual", "ipm-hsic", "ipm-wasserstein", "ps", "tr")
DENSITY_FLOOR = 1e-6


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "factual"
    gamma: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    tr_knots: int = 0
    tr_lr: float = 0.001
    hsic: HsicConfig = field(default_factory=HsicConfig)
    wasserstein: WassersteinConfig = field(default_factory=WassersteinConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        for name in ("gamma", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.kind == "tr" and self.tr_knots < 1:
            raise ValueError("targeted regularization needs tr_knots >= 1")

    @property
    def needs_propensity(self) -> bool:
        return self.kind in ("ps", "tr")

    def describe(self) -> str:
        return f"{self.kind}(gamma={self.gamma:g}, alpha={self.alpha:g}, beta={self.beta:g})"


@dataclass
class Batch:
    X: np.ndarray
    s: np.ndarray
    y: np.ndarray
    w: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.y)


def check_compatible(model: DoseResponseNet, spec: ObjectiveSpec):
    cfg = model.cfg
    if spec.needs_propensity and not cfg.propensity_bins:
        raise ValueError(f"objective {spec.kind!r} needs a model with a propensity head")
    if spec.kind == "tr" and cfg.tr_knots != spec.tr_knots:
        raise ValueError("model and objective disagree on the TR knot count")
    if spec.kind.startswith("ipm") and cfg.architecture == "mlp":
        raise ValueError("IPM penalties need a representation network; the MLP has none")


def _mse(pred, y):
    return nc.mean(nc.square(pred - y))


def loss_factual(batch: Batch, model: DoseResponseNet, params, fw=None):
    if len(batch) == 0:
        raise ValueError("empty batch")
    fw = model.forward(params, batch.X, batch.s, batch.w) if fw is None else fw
    return _mse(fw.outcome, batch.y)


def ipm_penalty(r, s, spec: ObjectiveSpec, rng=None):
    if spec.kind == "ipm-hsic":
        return hsic(r, s, spec.hsic)
    if spec.kind == "ipm-wasserstein":
        return wasserstein_independence(r, s, spec.wasserstein, rng=rng)
    raise ValueError(f"{spec.kind!r} is not an IPM objective")


def loss_ipm(batch: Batch, model: DoseResponseNet, params, spec: ObjectiveSpec, rng=None, fw=None):
    fw = model.forward(params, batch.X, batch.s, batch.w) if fw is None else fw
    loss = _mse(fw.outcome, batch.y)
    if spec.gamma == 0:
        return loss
    return loss + spec.gamma * ipm_penalty(fw.representation, batch.s, spec, rng)


def loss_ps(batch: Batch, model: DoseResponseNet, params, spec: ObjectiveSpec, fw=None):
    fw = model.forward(params, batch.X, batch.s, batch.w) if fw is None else fw
    loss = _mse(fw.outcome, batch.y)
    if spec.alpha == 0:
        return loss
    return loss - spec.alpha * nc.mean(fw.log_density)


def clipped_density(density, floor: float = DENSITY_FLOOR):
    low = nc.value_of(density) < floor
    if low.any():
        log.debug("propensity density below %g for %d units; clipped", floor, int(low.sum()))
    return nc.maximum(density, floor)


def loss_tr(batch: Batch, model: DoseResponseNet, params, spec: ObjectiveSpec, fw=None):
    fw = model.forward(params, batch.X, batch.s, batch.w) if fw is None else fw
    loss = loss_ps(batch, model, params, spec, fw=fw)
    if spec.beta == 0:
        return loss
    resid = batch.y - fw.outcome - fw.perturbation / clipped_density(fw.density)
    return loss + spec.beta * nc.mean(nc.square(resid))


def objective_loss(batch: Batch, model: DoseResponseNet, params, spec: ObjectiveSpec, rng=None):
    """Assemble the loss named by ``spec.kind``."""
    fw = model.forward(params, batch.X, batch.s, batch.w)
    if spec.kind == "factual":
        return loss_factual(batch, model, params, fw=fw)
    if spec.kind.startswith("ipm"):
        return loss_ipm(batch, model, params, spec, rng, fw=fw)
    if spec.kind == "ps":
        return loss_ps(batch, model, params, spec, fw=fw)
    return loss_tr(batch, model, params, spec, fw=fw)


def check_estimating_equation(model: DoseResponseNet, params, batch: Batch) -> float:
    """Mean of (y - h1 - eps(s)/h2) / h2; near zero once the TR moment condition holds."""
    fw = model.forward(params, batch.X, batch.s, batch.w)
    dens = np.maximum(nc.value_of(fw.density), DENSITY_FLOOR)
    pert = nc.value_of(fw.perturbation) if fw.perturbation is not None else 0.0
    resid = batch.y - nc.value_of(fw.outcome) - pert / dens
    return float(np.mean(resid / dens))
