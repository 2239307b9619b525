"""Central finite differences, used as the independent gradient oracle."""
import numpy as np


def finite_difference(f, params, h=1e-5, names=None, max_entries=None, rng=None):
    """Numerical gradient of scalar ``f(params)`` for every (or a sample of) entries."""
    grads = {}
    for name in names or list(params):
        p = params[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = f(params)
            flat[i] = old - h
            down = f(params)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = (g, idx)
    return grads


def max_rel_error(analytic, numeric, idx, floor=1e-6):
    a = analytic.reshape(-1)[idx]
    n = numeric.reshape(-1)[idx]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))) if len(idx) else 0.0


OBJECTIVE_KINDS = ("factual", "ipm-hsic", "ipm-wasserstein", "ps", "tr")


def objective_gradient_error(kind, draw, n=16, n_cov=6, max_entries=6):
    """Worst relative error between taped and finite-difference gradients of one objective.

    Batch-dependent constants that the tape treats as fixed (HSIC bandwidths,
    the Wasserstein cost normalizer and dosage permutation) are frozen at the
    base point so the numerical oracle differentiates the same function.
    """
    from doseflow import numcore as nc
    from doseflow.balance import HsicConfig, WassersteinConfig, median_heuristic, sq_distances
    from doseflow.datagen import make_rng
    from doseflow.models import DoseResponseNet, ModelConfig
    from doseflow.objectives import Batch, ObjectiveSpec, objective_loss

    rng = make_rng(1000 + draw)
    extra = {"propensity_bins": 10} if kind in ("ps", "tr") else {}
    if kind == "tr":
        extra["tr_knots"] = 5
    model = DoseResponseNet(ModelConfig("vcnet", n_cov, **extra))
    params = model.init_params(rng)
    if kind == "tr":
        params["tr.a"] = rng.normal(scale=0.3, size=params["tr.a"].shape)
    batch = Batch(rng.uniform(size=(n, n_cov)), rng.uniform(0.02, 0.98, size=n), rng.normal(size=n))

    spec_kw = {"factual": {}, "ps": {"alpha": 0.7}, "tr": {"alpha": 0.5, "beta": 2.0, "tr_knots": 5}}.get(kind, {})
    if kind == "ipm-hsic":
        r = nc.value_of(model.forward(params, batch.X, batch.s).representation)
        spec_kw = {"gamma": 30.0, "hsic": HsicConfig(median_heuristic(r), median_heuristic(batch.s))}
    elif kind == "ipm-wasserstein":
        r = nc.value_of(model.forward(params, batch.X, batch.s).representation)
        perm = make_rng(draw).permutation(n)
        z = (batch.s - batch.s.mean()) / batch.s.std()
        A = np.column_stack([r, z])
        B = np.column_stack([r, z[perm]])
        scale = float(np.mean(nc.value_of(sq_distances(A, B))))
        spec_kw = {"gamma": 30.0, "wasserstein": WassersteinConfig(max_iter=20000, tol=1e-14, cost_scale=scale)}
    spec = ObjectiveSpec(kind, **spec_kw)

    def loss(p):
        return objective_loss(batch, model, p, spec, rng=make_rng(draw))

    tape = nc.Tape()
    grads = nc.backward(tape, loss(tape.variables(params)))
    numeric = finite_difference(lambda p: float(nc.value_of(loss(p))), {k: v.copy() for k, v in params.items()},
                                max_entries=max_entries, rng=make_rng(2000 + draw))
    return max(max_rel_error(grads[k], g, idx) for k, (g, idx) in numeric.items())
