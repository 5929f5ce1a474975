import numpy as np
import pytest

from off2on.data import Batch


def relerr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def finite_diff(net, f, eps=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` over every parameter of ``net``."""
    flat = net.flat_params()
    g = np.zeros_like(flat)
    for i in range(len(flat)):
        x = flat.copy()
        x[i] += eps
        net.set_flat_params(x)
        lp = f()
        x[i] -= 2 * eps
        net.set_flat_params(x)
        lm = f()
        g[i] = (lp - lm) / (2 * eps)
    net.set_flat_params(flat)
    return g


def random_batch(rng, b, obs_dim, act_dim, p_done=0.3) -> Batch:
    return Batch(rng.normal(size=(b, obs_dim)), rng.uniform(-1, 1, (b, act_dim)), rng.normal(size=b),
                 rng.normal(size=(b, obs_dim)), rng.random(b) < p_done)


def randomize(rng, *nets, scale=0.5):
    for net in nets:
        net.set_flat_params(rng.normal(0.0, scale, net.flat_params().shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
