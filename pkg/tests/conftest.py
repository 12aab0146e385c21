import numpy as np
import pytest


def fd_gradients(model, x, y, h=1e-3, eps=0.0):
    """Independent central-difference gradient oracle at f64."""
    params = {n: e.weights.astype(np.float64) for n, e in model.store.items()}
    out = {}
    for name, w in params.items():
        flat = w.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = model.loss(x, y, eps=eps, params=params)
            flat[i] = orig - h
            lm = model.loss(x, y, eps=eps, params=params)
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        out[name] = g.reshape(w.shape)
    return out


def max_rel_error(analytic, fd):
    worst = 0.0
    for name in fd:
        a = analytic[name].reshape(-1)
        f = fd[name].reshape(-1)
        worst = max(worst, float(np.max(np.abs(a - f) / (np.abs(f) + 1e-8))))
    return worst


@pytest.fixture
def tmp_out(tmp_path):
    return str(tmp_path)
