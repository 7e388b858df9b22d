"""Finite-difference check of the end-to-end loss gradient on tie-free instances."""

import numpy as np

from mlal.model import ScorerParams, forward, loss, loss_and_grad
from mlal.scoremap import PoolConfig
from oracles import central_difference

H_STEP = 1e-5


def _order_gap(params, x, k_top, k_bot):
    """Smallest gap at the top-k and bottom-k boundaries of any class map."""
    n, h, w, d = x.shape
    m = params.pool.maps_per_class
    cells = x.reshape(n, h * w, d) @ params.weight.T + params.bias
    cells = cells.reshape(n, h * w, -1, m).mean(axis=-1)
    ordered = np.sort(cells, axis=1)
    gaps = [np.inf]
    if k_top < h * w:
        gaps.append(np.min(ordered[:, -k_top] - ordered[:, -k_top - 1]))
    if k_bot < h * w:
        gaps.append(np.min(ordered[:, k_bot] - ordered[:, k_bot - 1]))
    return min(gaps)


def make_instance(rng, mode, m):
    c = int(rng.integers(1, 4))
    d = int(rng.integers(2, 5))
    h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    k_top = int(rng.integers(1, h * w))
    k_bot = int(rng.integers(1, h * w - k_top + 1))
    pool = PoolConfig(mode=mode, k_top=k_top, k_bot=k_bot, alpha=float(rng.uniform(0.1, 1.0)), maps_per_class=m)
    while True:
        params = ScorerParams(rng.normal(size=(c * m, d)), rng.normal(size=c * m), pool)
        x = rng.normal(size=(int(rng.integers(1, 4)), h, w, d))
        y = rng.integers(0, 2, size=(x.shape[0], c))
        if _order_gap(params, x, k_top, k_bot) > 1e-2:
            return params, x, y


def gradient_check_instance(seed, mode="weldon", m=1) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    params, x, y = make_instance(rng, mode, m)
    _, gw, gb = loss_and_grad(params, x, y)
    analytic = np.concatenate([gw.ravel(), gb.ravel()])
    n_w = params.weight.size

    def f(flat):
        flat = np.asarray(flat)
        p = ScorerParams(flat[:n_w].reshape(params.weight.shape), flat[n_w:], params.pool)
        return loss(forward(p, x), y)

    numeric = np.array(
        central_difference(f, np.concatenate([params.weight.ravel(), params.bias]).tolist(), H_STEP)
    )
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
