import numpy as np
import pytest

from doseflow import numcore as nc
from doseflow.datagen import make_rng
from doseflow.models import (DoseResponseNet, GpsModel, ModelConfig, drnet_bin, fit_gps, head_param_count,
                             load_checkpoint, predict_vcnet, propensity_density, represent, save_checkpoint)
from gradcheck import finite_difference, max_rel_error


def _net(arch, **kw):
    return DoseResponseNet(ModelConfig(arch, 4, **kw))


def test_representation_zero_weights_is_zero():
    net = _net("vcnet")
    p = {k: np.zeros_like(v) for k, v in net.init_params(make_rng(0)).items()}
    assert np.all(represent(p, np.ones((3, 4))) == 0)


def test_representation_shape_and_identical_rows():
    net = _net("vcnet")
    p = net.init_params(make_rng(1))
    X = np.tile(make_rng(2).uniform(size=(1, 4)), (3, 1))
    r = represent(p, X)
    assert r.shape == (3, 50)
    assert np.array_equal(r[0], r[2])
    with pytest.raises(nc.ShapeError):
        represent(p, np.ones((3, 5)))


def test_vcnet_zero_coefficients_predict_zero():
    net = _net("vcnet")
    p = {k: np.zeros_like(v) for k, v in net.init_params(make_rng(0)).items()}
    out = net.predict(p, make_rng(1).uniform(size=(7, 4)), np.linspace(0.05, 0.95, 7))
    assert np.all(out == 0)


def test_vcnet_parameter_count_is_L_times_plain_head():
    net = _net("vcnet")
    p = net.init_params(make_rng(0))
    n_head = sum(v.size for k, v in p.items() if k.startswith("head0."))
    assert n_head == 5 * head_param_count(net.cfg)


def test_vcnet_continuous_and_smooth_at_knots():
    net = _net("vcnet")
    for seed in range(20):
        p = net.init_params(make_rng(seed))
        X = make_rng(100 + seed).uniform(size=(1, 4))
        f = lambda s: net.predict(p, X, np.array([s]))[0]  # noqa: E731
        for k in (1 / 3, 2 / 3):
            assert abs(f(k + 1e-5) - f(k - 1e-5)) < 1e-3
            # one-sided slopes agree (C1)
            left = (f(k) - f(k - 1e-4)) / 1e-4
            right = (f(k + 1e-4) - f(k)) / 1e-4
            assert abs(left - right) < 1e-2 * max(1.0, abs(left))


@pytest.mark.parametrize("s,idx", [(0.15, 0), (0.95, 4), (1.0, 4), (0.0, 0), (0.2, 1), (0.5999, 2)])
def test_drnet_bin(s, idx):
    assert drnet_bin(s) == idx


def test_drnet_routes_to_single_head():
    net = _net("drnet")
    p = net.init_params(make_rng(0))
    X = make_rng(1).uniform(size=(1, 4))
    base = net.predict(p, X, np.array([0.5]))[0]
    # perturbing another bin's head leaves the prediction unchanged; perturbing bin 2 changes it
    q = dict(p)
    q["head0.bin0.b2"] = p["head0.bin0.b2"] + 1.0
    assert net.predict(q, X, np.array([0.5]))[0] == base
    q["head0.bin2.b2"] = p["head0.bin2.b2"] + 1.0
    assert net.predict(q, X, np.array([0.5]))[0] == pytest.approx(base + 1.0)


def test_drnet_continuous_within_bins():
    net = _net("drnet")
    p = net.init_params(make_rng(3))
    X = make_rng(4).uniform(size=(1, 4))
    s = np.linspace(0.001, 0.999, 999)
    f = net.predict(p, np.repeat(X, len(s), axis=0), s)
    jumps = np.abs(np.diff(f))
    boundary = np.diff(drnet_bin(s)) != 0
    assert jumps[~boundary].max() < 0.05


def test_propensity_density_cases():
    net = _net("vcnet", propensity_bins=10)
    p = net.init_params(make_rng(0))
    p["prop.W"] = np.zeros_like(p["prop.W"])
    r = represent(p, np.ones((3, 4)))
    np.testing.assert_allclose(propensity_density(p, r, np.array([0.05, 0.5, 0.97]), 10), 1.0, rtol=1e-14)

    p["prop.b"] = np.zeros(10)
    p["prop.b"][3] = 20.0
    grid = (np.arange(10) + 0.5) / 10
    dens = propensity_density(p, np.repeat(r[:1], 10, axis=0), grid, 10)
    assert np.all(dens > 0)
    assert dens.sum() * 0.1 == pytest.approx(1.0, abs=1e-14)
    assert dens[3] > 9.99 and np.all(np.delete(dens, 3) < 1e-7)


def _fd_check(net, X, s, seed, max_entries=20):
    params = net.init_params(make_rng(seed))
    weights = make_rng(seed + 1).normal(size=len(s))

    def f(p):
        return float(np.dot(net.forward(p, X, s).outcome, weights))

    tape = nc.Tape()
    leaves = tape.variables(params)
    out = net.forward(leaves, X, s).outcome
    grads = nc.backward(tape, nc.sum(out * weights))
    numeric = finite_difference(f, {k: v.copy() for k, v in params.items()}, max_entries=max_entries,
                                rng=make_rng(seed + 2))
    for k, (g, idx) in numeric.items():
        assert max_rel_error(grads[k], g, idx) < 1e-4, k


@pytest.mark.parametrize("arch", ["mlp", "drnet", "vcnet"])
def test_output_gradients_match_finite_differences(arch):
    X = make_rng(5).uniform(size=(8, 4))
    s = np.array([0.05, 0.15, 0.3, 0.45, 0.55, 0.7, 0.85, 0.95])
    _fd_check(_net(arch), X, s, seed=11)


def test_gradient_through_dosage():
    net = _net("vcnet")
    p = net.init_params(make_rng(0))
    X = make_rng(1).uniform(size=(4, 4))
    s0 = np.array([0.2, 0.4, 0.6, 0.8])
    tape = nc.Tape()
    leaves = tape.variables(p)
    s = tape.variable(s0, name="s")
    g = nc.backward(tape, nc.sum(predict_vcnet(leaves, "head0", represent(leaves, X), s, net.cfg.vc_basis)))["s"]
    h = 1e-6
    fd = (net.predict(p, X, s0 + h) - net.predict(p, X, s0 - h)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_multi_treatment_routing():
    net = DoseResponseNet(ModelConfig("vcnet", 4, n_treatments=2))
    p = net.init_params(make_rng(0))
    X = make_rng(1).uniform(size=(4, 4))
    s = np.full(4, 0.5)
    w = np.array([0, 1, 0, 1])
    both = net.predict(p, X, s, w)
    np.testing.assert_allclose(both[w == 0], net.predict(p, X[w == 0], s[w == 0], np.zeros(2, int)), rtol=1e-12)
    np.testing.assert_allclose(both[w == 1], net.predict(p, X[w == 1], s[w == 1], np.ones(2, int)), rtol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("cnn", 4)
    with pytest.raises(ValueError):
        ModelConfig("mlp", 4, propensity_bins=10)
    with pytest.raises(ValueError):
        ModelConfig("vcnet", 4, tr_knots=5)


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig("vcnet", 4, propensity_bins=10, tr_knots=5)
    net = DoseResponseNet(cfg)
    p = net.init_params(make_rng(0))
    save_checkpoint(tmp_path / "c.json", cfg, p, {"note": 1})
    cfg2, p2, extra = load_checkpoint(tmp_path / "c.json")
    assert cfg2 == cfg and extra == {"note": 1}
    assert p2.keys() == p.keys()
    for k in p:
        assert np.array_equal(p[k], p2[k])
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")


def test_gps_recovers_linear_treatment_model():
    rng = make_rng(0)
    X = rng.normal(size=(4000, 3))
    beta = np.array([0.2, 0.5, -0.3, 0.1])
    s = beta[0] + X @ beta[1:] + rng.normal(scale=0.3, size=4000)
    y = s + rng.normal(size=4000)
    m = fit_gps(X, s, y)
    np.testing.assert_allclose(m.treatment_coef, beta, atol=0.03)
    assert m.sigma2 == pytest.approx(0.09, rel=0.1)


def test_gps_independent_treatment_gives_constant_score():
    rng = make_rng(1)
    X = rng.normal(size=(200, 2))
    m = GpsModel(np.array([0.5, 0.0, 0.0]), 0.04)
    g = m.gps(X, np.full(200, 0.4))
    assert np.ptp(g) == 0.0


def test_gps_too_few_rows():
    with pytest.raises(ValueError):
        fit_gps(np.ones((3, 6)), np.ones(3), np.ones(3))


def test_gps_singular_design_uses_jitter(caplog):
    X = np.ones((50, 2))  # constant columns make stage one singular
    s = np.linspace(0.1, 0.9, 50)
    m = fit_gps(X, s, s ** 2)
    assert np.all(np.isfinite(m.treatment_coef))
    assert "ridge jitter" in caplog.text
