"""Mini-batch Adam training with early stopping on validation factual MSE."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import numcore as nc
from .datagen import Dataset, make_rng
from .models import DoseResponseNet, ModelParams
from .objectives import Batch, ObjectiveSpec, check_compatible, objective_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 1000
    weight_decay: float = 0.005
    patience: int = 50
    max_epochs: int = 800
    seed: int = 0
    clip_norm: Optional[float] = 10.0

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    params: ModelParams
    train_curve: List[float]
    val_curve: List[float]
    best_epoch: int
    epochs_run: int
    seconds: float = 0.0

    @property
    def best_val(self) -> float:
        return self.val_curve[self.best_epoch - 1]

    def write_curves(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "train_loss", "val_mse"])
            for i, (a, b) in enumerate(zip(self.train_curve, self.val_curve), start=1):
                out.writerow([i, repr(a), repr(b)])


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def validation_mse(model: DoseResponseNet, params, data: Dataset) -> float:
    out = nc.value_of(model.forward(params, data.X, data.s, data.w).outcome)
    return float(np.mean((out - data.y) ** 2))


def train(model: DoseResponseNet, objective: ObjectiveSpec, train_data: Dataset, val_data: Dataset,
          cfg: TrainConfig = TrainConfig(), params: Optional[ModelParams] = None) -> TrainResult:
    """Fit ``model`` and return the parameters of the best validation epoch."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be nonempty")
    check_compatible(model, objective)
    rng = make_rng(cfg.seed)
    params = model.init_params(rng) if params is None else {k: v.copy() for k, v in params.items()}
    main_names = {k: v for k, v in params.items() if not k.startswith("tr.")}
    opt = nc.AdamState.for_params(main_names, cfg.lr, cfg.weight_decay)
    tr_opt = None
    if "tr.a" in params:
        tr_opt = nc.AdamState.for_params({"tr.a": params["tr.a"]}, objective.tr_lr, cfg.weight_decay)

    stopper = EarlyStopping(cfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    train_curve, val_curve = [], []
    n = len(train_data)
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        # one batch per epoch: order is irrelevant to the loss, keeping it fixed lets
        # the dosage-side kernel cache hit
        order = rng.permutation(n) if n > cfg.batch_size else np.arange(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = Batch(train_data.X[idx], train_data.s[idx], train_data.y[idx], train_data.w[idx])
            tape = nc.Tape()
            leaves = tape.variables(params)
            try:
                loss = objective_loss(batch, model, leaves, objective, rng)
                grads = nc.backward(tape, loss)
            except nc.NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc} under {objective.describe()}") from exc
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"epoch {epoch}: non-finite gradient under {objective.describe()}")
            if cfg.clip_norm:
                nc.clip_global_norm(grads, cfg.clip_norm)
            nc.adam_step(params, grads, opt)
            if tr_opt is not None:
                nc.adam_step(params, grads, tr_opt)
            batch_losses.append(float(loss.value) * len(idx))
        train_curve.append(sum(batch_losses) / n)
        try:
            val = validation_mse(model, params, val_data)
        except nc.NumericError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc} under {objective.describe()}") from exc
        val_curve.append(val)
        stop = stopper.update(val)
        if stopper.improved:
            best = {k: v.copy() for k, v in params.items()}
        if stop:
            break
    seconds = time.perf_counter() - start
    log.debug("trained %s/%s: %d epochs, best %d (val %.4g) in %.1fs", model.cfg.architecture,
              objective.kind, len(val_curve), stopper.best_epoch, stopper.best, seconds)
    return TrainResult(best, train_curve, val_curve, stopper.best_epoch, len(val_curve), seconds)
