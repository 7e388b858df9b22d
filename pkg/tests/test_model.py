import itertools
import math

import numpy as np
import pytest

from mlal.errors import ConfigError, UsageError
from mlal.model import (
    EPS,
    Prediction,
    ScorerParams,
    average_precision,
    evaluate_map,
    forward,
    init_params,
    loss,
    loss_and_grad,
    mean_average_precision,
    train,
)
from mlal.scoremap import PoolConfig
from oracles import ap_oracle, map_oracle, pool_oracle
from gradcheck import gradient_check_instance


def _sigmoid(v):
    return 1 / (1 + math.exp(-v))


def test_zero_model_is_uninformed():
    params = ScorerParams(np.zeros((3, 4)), np.zeros(3), PoolConfig(k_top=1, k_bot=1))
    pred = forward(params, np.random.default_rng(0).normal(size=(2, 2, 4)))
    assert np.all(pred.confidences == 0.5)
    assert np.all(pred.separations == 0.0)


@pytest.mark.parametrize("mode,factor", [("weldon", 1.0), ("wildcat", 2.0)])
def test_bias_only_model(mode, factor):
    params = ScorerParams(np.zeros((2, 3)), np.array([0.4, -1.2]), PoolConfig(mode=mode, k_top=1, k_bot=1))
    pred = forward(params, np.ones((3, 3, 3)))
    assert pred.confidences == pytest.approx([_sigmoid(0.4 * factor), _sigmoid(-1.2 * factor)], rel=1e-15)
    assert np.all(pred.separations == 0.0)


@pytest.mark.parametrize("mode,m", [("weldon", 1), ("wildcat", 1), ("wildcat", 3)])
def test_forward_matches_composed_oracle(mode, m):
    rng = np.random.default_rng(42)
    d, c = 5, 3
    x = rng.normal(size=(2, 2, d))
    params = ScorerParams(rng.normal(size=(c * m, d)), rng.normal(size=c * m),
                          PoolConfig(mode=mode, k_top=1, k_bot=1, alpha=0.5, maps_per_class=m))
    pred = forward(params, x)
    cells = [x[h, w] for h, w in itertools.product(range(2), range(2))]
    for j in range(c):
        class_map = []
        for cell in cells:
            raw = [float(np.dot(params.weight[j * m + r], cell) + params.bias[j * m + r]) for r in range(m)]
            class_map.append(sum(raw) / m)
        score, sep, _, _ = pool_oracle(class_map, 1, 1, mode, 0.5)
        assert pred.scores[j] == pytest.approx(score, rel=1e-12)
        assert pred.separations[j] == pytest.approx(sep, rel=1e-12)
        assert pred.confidences[j] == pytest.approx(_sigmoid(score), rel=1e-12)


def test_forward_shape_error():
    params = init_params(2, 4, PoolConfig(), seed=0)
    with pytest.raises(ConfigError):
        forward(params, np.zeros((3, 3, 5)))


def test_loss_examples():
    half = Prediction(np.full(4, 0.5), None, np.zeros(4))
    assert loss(half, [0, 1, 1, 0]) == pytest.approx(math.log(2), rel=1e-15)

    exact = Prediction(np.array([1.0, 0.0, 1.0]), None, np.zeros(3))
    per_class = -math.log1p(-EPS)
    value = loss(exact, [1, 0, 1])
    assert value == pytest.approx(per_class, rel=1e-9)
    assert value <= 1.61e-6

    rng = np.random.default_rng(1)
    p, y = rng.uniform(0.05, 0.95, 6), rng.integers(0, 2, 6)
    perm = rng.permutation(6)
    assert loss(Prediction(p, None, p), y) == pytest.approx(loss(Prediction(p[perm], None, p), y[perm]), rel=1e-15)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode,m", [("weldon", 1), ("wildcat", 2)])
def test_gradient_matches_finite_differences(seed, mode, m):
    assert gradient_check_instance(seed, mode, m) <= 1e-4


def _toy_problem(seed=0, n=40):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, 3, 4))
    y = rng.integers(0, 2, size=(n, 1))
    x[y[:, 0] == 1, 1, 1, 0] += 3.0
    return x, y


def test_train_reduces_loss_and_is_deterministic():
    x, y = _toy_problem()
    p0 = init_params(1, 4, PoolConfig(k_top=1, k_bot=1), seed=3)
    before = loss_and_grad(p0, x, y)[0]
    p1 = train(p0, x, y, epochs=200, lr=0.1, seed=9)
    assert loss_and_grad(p1, x, y)[0] < before
    p2 = train(p0, x, y, epochs=200, lr=0.1, seed=9)
    assert np.array_equal(p1.weight, p2.weight) and np.array_equal(p1.bias, p2.bias)


def test_train_noop_cases():
    x, y = _toy_problem(n=10)
    p0 = init_params(1, 4, PoolConfig(k_top=1, k_bot=1), seed=3)
    for kwargs in ({"epochs": 0}, {"epochs": 5, "lr": 0.0}):
        p = train(p0, x, y, seed=1, **kwargs)
        assert np.array_equal(p.weight, p0.weight) and np.array_equal(p.bias, p0.bias)
        assert p.weight is not p0.weight
    with pytest.raises(UsageError):
        train(p0, x[:0], y[:0], epochs=1)


def test_class_permutation_equivariance():
    rng = np.random.default_rng(8)
    c, m, d = 4, 2, 3
    pool = PoolConfig(mode="wildcat", k_top=2, k_bot=1, alpha=0.3, maps_per_class=m)
    params = ScorerParams(rng.normal(size=(c * m, d)), rng.normal(size=c * m), pool)
    perm = rng.permutation(c)
    rows = np.concatenate([np.arange(j * m, j * m + m) for j in perm])
    permuted = ScorerParams(params.weight[rows], params.bias[rows], pool)
    x = rng.normal(size=(5, 3, 3, d))
    a, b = forward(params, x), forward(permuted, x)
    np.testing.assert_array_equal(a.confidences[:, perm], b.confidences)
    np.testing.assert_array_equal(a.separations[:, perm], b.separations)


def test_confidences_strictly_inside_unit_interval():
    params = init_params(3, 4, PoolConfig(), seed=0, scale=5.0)
    pred = forward(params, np.random.default_rng(0).normal(size=(20, 4, 4, 4)))
    assert np.all((pred.confidences > 0) & (pred.confidences < 1))


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, rel=1e-15)
    assert average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.0, 0.1, 0.8, 0.9], [1, 1, 0, 0]) < 1.0
    assert math.isnan(average_precision([0.2, 0.1], [0, 0]))
    # equal scores: lower sample id ranks first
    assert average_precision([0.5, 0.5], [0, 1], sample_ids=[0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [0, 1], sample_ids=[1, 0]) == 1.0


def test_map_perfect_ranking_and_exclusion():
    scores = np.array([[0.9, 0.1, 0.5], [0.8, 0.9, 0.5], [0.1, 0.2, 0.5]])
    labels = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0]])
    value, excluded = mean_average_precision(scores, labels)
    assert value == 1.0 and excluded == [2]
    with pytest.raises(UsageError):
        mean_average_precision(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(UsageError):
        mean_average_precision(scores, np.zeros_like(labels))


def test_map_against_oracle_random():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, c = rng.integers(1, 9), rng.integers(1, 4)
        scores = rng.integers(0, 4, size=(n, c)) / 4
        labels = rng.integers(0, 2, size=(n, c))
        expect = map_oracle(scores.tolist(), labels.tolist())
        if expect is None:
            continue
        assert mean_average_precision(scores, labels)[0] == expect
    assert ap_oracle([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333333, abs=1e-7)


def test_evaluate_map_end_to_end():
    x, y = _toy_problem(seed=2, n=60)
    params = train(init_params(1, 4, PoolConfig(k_top=1, k_bot=1), seed=0), x, y, epochs=100, lr=0.5, seed=0)
    assert 0.0 <= evaluate_map(params, x, y) <= 1.0
    assert evaluate_map(params, x, y) > 0.8
