import numpy as np
import pytest

from cafe_fl import nn


def central_fd_grad(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_instance(rng, max_params=200, output="sigmoid-binary"):
    """Random (spec, params, batch) with at most ``max_params`` parameters."""
    while True:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 7))] + [int(rng.integers(1, 9)) for _ in range(depth - 1)] + [1]
        act = str(rng.choice(["tanh", "relu"]))
        spec = nn.MlpSpec(tuple(widths), act, output)
        if spec.n_params <= max_params:
            break
    params = rng.normal(scale=0.8, size=spec.n_params)
    n = int(rng.integers(1, 12))
    X = rng.normal(size=(n, widths[0]))
    y = rng.integers(0, 2, size=n) if output == "sigmoid-binary" else rng.normal(size=n)
    return spec, params, nn.Batch(X, y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
