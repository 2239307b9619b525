"""End-to-end acceptance checks, one test per criterion.

The experiment-scale checks (criteria 4 to 6) train a few hundred networks
and take one to two hours on a single core. Their outputs are written to
``acceptance_output/`` (or ``$DOSEFLOW_ACCEPTANCE_OUT``) for inspection.
"""
import json
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from doseflow import datagen as dg
from doseflow import experiment as ex
from doseflow.balance import HsicConfig, WassersteinConfig, hsic, sinkhorn_cost
from doseflow.evaluate import DosageGrid, amse, evaluate, mise
from doseflow.models import DoseResponseNet, ModelConfig
from doseflow.plotting import plot_sweep
from gradcheck import OBJECTIVE_KINDS, objective_gradient_error
from oracles import brute_hsic, exact_ot, sq_cost

OUT = Path(os.environ.get("DOSEFLOW_ACCEPTANCE_OUT", Path(__file__).resolve().parents[1] / "acceptance_output"))
TABLE_METHODS = ["mlp", "drnet", "vcnet", "vcnet-hsic", "vcnet-tr"]


@pytest.fixture(scope="session")
def table():
    cfg = ex.ExperimentConfig(dataset=ex.DatasetSpec("synthetic", n=500), seeds=list(range(10)),
                              methods=TABLE_METHODS, out_dir=str(OUT / "table"))
    return ex.run_table(cfg)


@pytest.fixture(scope="session")
def sweeps():
    out = {}
    for name in ("synthetic", "ihdp"):
        spec = ex.DatasetSpec(name, n=500 if name == "synthetic" else None)
        tuned = ex.grid_search(spec, "vcnet", {"lr": ex.DEFAULT_GRIDS["lr"]})
        res = ex.gamma_sweep(spec, [0.0] + ex.DEFAULT_GRIDS["gamma"], list(range(5)), tuned.best["lr"])
        d = OUT / f"sweep_{name}"
        d.mkdir(parents=True, exist_ok=True)
        ex.write_sweep(d / "sweep.csv", res)
        ex.write_runs(d / "runs.csv", res.runs)
        ex.write_runs(d / "tuning.csv", tuned.trace)
        plot_sweep(res, d / "sweep.png", title=name)
        out[name] = res
    return out


@pytest.mark.criterion(1, "HSIC matrix form equals quadruple-loop brute force")
def test_criterion_1_hsic_oracle(record_property):
    rng = dg.make_rng(101)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 21))
        R = rng.normal(size=(n, int(rng.integers(1, 5))))
        T = rng.uniform(size=(n, 1))
        sr, st = rng.uniform(0.2, 3.0, size=2)
        want = brute_hsic(R.tolist(), T.tolist(), sr, st)
        got = float(hsic(R, T, HsicConfig(sr, st)))
        worst = max(worst, abs(got - want) / abs(want))
    record_property("max_rel_error", f"{worst:.2e}")
    assert worst < 1e-10


@pytest.mark.criterion(2, "Sinkhorn at eps=1e-3 within 5% of exact OT on n=3 clouds")
def test_criterion_2_sinkhorn_oracle(record_property):
    rng = dg.make_rng(102)
    worst = 0.0
    for _ in range(50):
        A, B = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        want = exact_ot(sq_cost(A.tolist(), B.tolist()))
        got = float(sinkhorn_cost(A, B, WassersteinConfig(epsilon=1e-3, max_iter=10000)))
        worst = max(worst, abs(got - want) / want)
    record_property("max_rel_gap", f"{worst:.2e}")
    assert worst < 0.05


@pytest.mark.criterion(3, "objective gradients match central finite differences")
def test_criterion_3_gradient_suite(record_property):
    worst = {k: max(objective_gradient_error(k, draw) for draw in range(10)) for k in OBJECTIVE_KINDS}
    for k, v in worst.items():
        record_property(k, f"{v:.1e}")
    assert max(worst.values()) < 1e-4


@pytest.mark.criterion(4, "some gamma > 0 gives relative MISE < 0.95 (Synthetic and IHDP)")
def test_criterion_4_gamma_sweep(sweeps, record_property):
    for name, res in sweeps.items():
        best = res.gammas[res.relative.index(res.best_relative)]
        record_property(name, f"min relative {res.best_relative:.3f} at gamma {best:.3g} (lr {res.lr:g})")
    assert all(res.best_relative < 0.95 for res in sweeps.values())


def _means(table):
    return {m: table[m].mean_sqrt_mise for m in TABLE_METHODS}


@pytest.mark.criterion(5, "MLP > {DRNet, VCNet} > VCNet-HSIC and VCNet-HSIC in [0.20, 0.40]")
def test_criterion_5_table_ordering(table, record_property):
    m = _means(table)
    for k in TABLE_METHODS:
        record_property(k, f"{m[k]:.3f} ({table[k].std_sqrt_mise:.3f})")
    assert all(table[k].n_failed == 0 for k in TABLE_METHODS)
    assert m["mlp"] > m["drnet"] and m["mlp"] > m["vcnet"]
    assert m["drnet"] > m["vcnet-hsic"] and m["vcnet"] > m["vcnet-hsic"]
    assert 0.20 <= m["vcnet-hsic"] <= 0.40


@pytest.mark.criterion(6, "VCNet-HSIC sqrt MISE <= VCNet-TR sqrt MISE")
def test_criterion_6_doubly_robust_contrast(table, record_property):
    h, t = table["vcnet-hsic"], table["vcnet-tr"]
    record_property("sqrt_mise", f"hsic {h.mean_sqrt_mise:.3f} vs tr {t.mean_sqrt_mise:.3f}")
    # reported only: the population-level comparison is not gated
    record_property("sqrt_amse", f"hsic {h.mean_sqrt_amse:.3f} vs tr {t.mean_sqrt_amse:.3f}")
    assert h.mean_sqrt_mise <= t.mean_sqrt_mise


@pytest.mark.criterion(7, "AMSE <= MISE on every run; oracle gives 0; two-unit example")
def test_criterion_7_metric_identities(table, sweeps, record_property):
    runs = list(table.runs) + [r for t in table.tuning.values() for r in t.trace]
    runs += [r for res in sweeps.values() for r in res.runs]
    ok = [r for r in runs if r.ok]
    record_property("runs_checked", len(ok))
    assert ok and all(r.amse <= r.mise for r in ok)

    for name in ("synthetic", "ihdp", "news"):
        data = ex.DatasetSpec(name, n=200, vocab=30).generate(0)
        rep = evaluate(data.oracle, data.X, data.oracle)
        assert rep.mise == 0.0 and rep.amse == 0.0

    grid = DosageGrid(np.array([0.25, 0.5, 0.75]), np.full(3, 1 / 3))
    X = np.array([[0.0], [1.0]])
    zero = lambda X, s, w=None: np.zeros(len(s))  # noqa: E731
    pred = lambda X, s, w=None: np.where(X[:, 0] == 0, 0.1, -0.1)  # noqa: E731
    assert amse(pred, X, zero, grid) == 0.0
    # 0.01 as produced by IEEE arithmetic, fl(0.1 * 0.1)
    assert mise(pred, X, zero, grid) == 0.1 * 0.1


@pytest.mark.criterion(8, "VCNet continuity at knots and DRNet routing by floor(5s)")
def test_criterion_8_model_structure(record_property):
    net = DoseResponseNet(ModelConfig("vcnet", 6))
    worst = 0.0
    for draw in range(100):
        p = net.init_params(dg.make_rng(300 + draw))
        X = dg.make_rng(500 + draw).uniform(size=(1, 6))
        for k in (1 / 3, 2 / 3):
            out = net.predict(p, np.repeat(X, 2, axis=0), np.array([k - 1e-5, k + 1e-5]))
            worst = max(worst, abs(out[1] - out[0]))
    record_property("max_knot_gap", f"{worst:.1e}")
    assert worst < 1e-3

    dr = DoseResponseNet(ModelConfig("drnet", 6))
    p = dr.init_params(dg.make_rng(7))
    ks = np.arange(1, 1000)
    s = ks / 1000
    X = np.repeat(dg.make_rng(8).uniform(size=(1, 6)), len(s), axis=0)
    base = dr.predict(p, X, s)
    # tag each head's output bias with its index; the shift then reveals the head used
    q = dict(p)
    for b in range(5):
        q[f"head0.bin{b}.b2"] = p[f"head0.bin{b}.b2"] + 1000.0 * b
    used = np.rint((dr.predict(q, X, s) - base) / 1000.0).astype(int)
    expected = np.minimum(5 * ks // 1000, 4)
    record_property("grid_points", len(s))
    assert np.array_equal(used, expected)


@pytest.mark.criterion(9, "identical config and seed reproduce per-run CSV rows byte for byte")
def test_criterion_9_determinism(tmp_path, record_property):
    cfg = {"dataset": {"name": "synthetic", "n": 120}, "seeds": [0, 1],
           "methods": ["mlp", "drnet-wass", "vcnet-hsic", "vcnet-ps", "vcnet-tr", "gps"],
           "hparams": {"mlp": {"lr": 0.005}, "drnet-wass": {"lr": 0.005, "gamma": 0.5},
                       "vcnet-hsic": {"lr": 0.005, "gamma": 1.0}, "vcnet-ps": {"lr": 0.005, "alpha": 0.5},
                       "vcnet-tr": {"lr": 0.005, "alpha": 1.0, "tr_lr": 0.001, "beta": 10.0, "tr_knots": 5},
                       "gps": {}},
           "train": {"max_epochs": 40, "patience": 10}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        subprocess.run([sys.executable, "-m", "doseflow.cli", "table", "--config", str(path), "--out", str(out)],
                       check=True, capture_output=True)
        outs.append((out / "runs.csv").read_bytes())
    lines = outs[0].decode().splitlines()
    record_property("rows", len(lines) - 1)
    assert len(lines) == 1 + 2 * len(cfg["methods"]) and all(",ok," in ln for ln in lines[1:])
    assert outs[0] == outs[1]
    assert not any(math.isnan(float(ln.split(",")[5])) for ln in lines[1:])
