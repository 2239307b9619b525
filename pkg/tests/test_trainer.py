import numpy as np
import pytest

from doseflow import datagen as dg
from doseflow import numcore as nc
from doseflow.balance import hsic
from doseflow.models import DoseResponseNet, ModelConfig
from doseflow.objectives import Batch, ObjectiveSpec, check_estimating_equation
from doseflow.trainer import EarlyStopping, TrainConfig, TrainingDiverged, train, validation_mse


def _splits(n=120, seed=0):
    data = dg.gen_synthetic(n, seed)
    return dg.split(data, dg.SplitSpec(seed=seed))


def test_early_stopping_flat_after_epoch_10():
    stop = EarlyStopping(50)
    losses = [1.0 / e for e in range(1, 11)] + [0.1] * 200
    for epoch, loss in enumerate(losses, start=1):
        if stop.update(loss):
            break
    assert epoch == 60 and stop.best_epoch == 10


def test_early_stopping_strictly_decreasing_never_stops():
    stop = EarlyStopping(50)
    assert not any(stop.update(1.0 / e) for e in range(1, 801))
    assert stop.best_epoch == 800


def test_train_runs_to_max_epochs_while_improving():
    tr, va, _ = _splits()
    model = DoseResponseNet(ModelConfig("vcnet", 6))
    res = train(model, ObjectiveSpec(), tr, va, TrainConfig(lr=1e-4, max_epochs=15, patience=50))
    assert res.epochs_run == 15 and len(res.train_curve) == 15


def test_deterministic_and_returns_best_epoch():
    tr, va, _ = _splits()
    model = DoseResponseNet(ModelConfig("vcnet", 6))
    cfg = TrainConfig(lr=0.01, max_epochs=40, patience=5, seed=3)
    a = train(model, ObjectiveSpec("ipm-hsic", gamma=1.0), tr, va, cfg)
    b = train(model, ObjectiveSpec("ipm-hsic", gamma=1.0), tr, va, cfg)
    assert a.val_curve == b.val_curve
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert validation_mse(model, a.params, va) == min(a.val_curve) == a.best_val
    assert all(v >= a.best_val for v in a.val_curve[a.best_epoch:])


def test_minibatches_cover_split():
    tr, va, _ = _splits(300)
    model = DoseResponseNet(ModelConfig("drnet", 6))
    res = train(model, ObjectiveSpec(), tr, va, TrainConfig(batch_size=32, max_epochs=3))
    assert res.epochs_run == 3 and all(np.isfinite(res.train_curve))


def test_only_observed_treatment_head_updates():
    rng = dg.make_rng(0)
    X = rng.uniform(size=(40, 6))
    s = rng.uniform(0.05, 0.95, size=40)
    ds = dg.Dataset(X, np.zeros(40, int), s, s.copy(), None, name="t")
    model = DoseResponseNet(ModelConfig("vcnet", 6, n_treatments=2))
    init = model.init_params(dg.make_rng(5))
    res = train(model, ObjectiveSpec(), ds, ds, TrainConfig(max_epochs=5, weight_decay=0.0), params=init)
    untouched = [k for k in init if k.startswith("head1.")]
    assert untouched and all(np.array_equal(res.params[k], init[k]) for k in untouched)
    assert not np.array_equal(res.params["head0.W1"], init["head0.W1"])


def test_large_gamma_reduces_representation_hsic():
    tr, va, _ = _splits(300, seed=1)
    model = DoseResponseNet(ModelConfig("vcnet", 6))
    cfg = TrainConfig(lr=0.005, max_epochs=150, patience=150, seed=1)
    vals = []
    for gamma in (0.0, 10 ** (10 / 6)):
        res = train(model, ObjectiveSpec("ipm-hsic", gamma=gamma), tr, va, cfg)
        vals.append(float(hsic(nc.value_of(model.forward(res.params, va.X, va.s).representation), va.s)))
    assert vals[1] < vals[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_weights():
    tr, va, _ = _splits()
    bad = dg.Dataset(tr.X, tr.w, tr.s, np.full(len(tr), 1e300), None, name="bad")
    model = DoseResponseNet(ModelConfig("vcnet", 6))
    with pytest.raises(TrainingDiverged, match=r"epoch 1.*gamma=2"):
        train(model, ObjectiveSpec("ipm-hsic", gamma=2.0), bad, va, TrainConfig(max_epochs=3))


def test_rejects_incompatible_and_empty():
    tr, va, _ = _splits()
    with pytest.raises(ValueError):
        train(DoseResponseNet(ModelConfig("vcnet", 6)), ObjectiveSpec("ps", alpha=1.0), tr, va)
    with pytest.raises(ValueError):
        train(DoseResponseNet(ModelConfig("vcnet", 6)), ObjectiveSpec(), tr.subset(np.arange(0)), va)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_curves_csv(tmp_path):
    tr, va, _ = _splits()
    res = train(DoseResponseNet(ModelConfig("vcnet", 6)), ObjectiveSpec(), tr, va, TrainConfig(max_epochs=4))
    res.write_curves(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_mse" and len(lines) == 5
    assert float(lines[-1].split(",")[2]) == res.val_curve[-1]


def test_tr_training_moves_estimating_equation_towards_zero():
    data = dg.gen_synthetic(500, 0)
    tr, va, _ = dg.split(data, dg.SplitSpec(seed=0))
    model = DoseResponseNet(ModelConfig("vcnet", 6, propensity_bins=10, tr_knots=10))
    spec = ObjectiveSpec("tr", alpha=1.0, beta=10 / np.sqrt(len(tr)), tr_knots=10, tr_lr=0.001)
    cfg = TrainConfig(lr=0.005, max_epochs=200, patience=200)
    batch = Batch(tr.X, tr.s, tr.y)
    before = abs(check_estimating_equation(model, model.init_params(dg.make_rng(cfg.seed)), batch))
    res = train(model, spec, tr, va, cfg)
    after = abs(check_estimating_equation(model, res.params, batch))
    assert after < 10 * before
    # an untrained model's residual sits on the scale of the outcomes
    assert 0.05 * np.std(tr.y) < before < 20 * np.std(tr.y)
