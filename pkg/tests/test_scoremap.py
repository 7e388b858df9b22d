import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mlal.errors import ConfigError, UsageError
from mlal.scoremap import (
    ClassSummary,
    PoolConfig,
    SeparationKind,
    default_k,
    pool_backward,
    weldon_pool,
    wildcat_class_pool,
    wildcat_spatial_pool,
)
from oracles import central_difference, pool_oracle

WELDON11 = PoolConfig(mode="weldon", k_top=1, k_bot=1)
WILDCAT11 = PoolConfig(mode="wildcat", k_top=1, k_bot=1, alpha=1.0)

small_maps = arrays(
    np.float64,
    st.tuples(st.integers(1, 4), st.integers(1, 4)),
    elements=st.floats(-50, 50, allow_nan=False, width=32),
)


def test_weldon_example():
    s = weldon_pool(np.array([[1.0, 2.0], [3.0, 4.0]]), WELDON11)
    assert s.class_score == 2.5
    assert s.separation == 3.0


def test_weldon_constant_map():
    cfg = PoolConfig(mode="weldon", k_top=8, k_bot=8)
    s = weldon_pool(np.full((4, 4), 1.75), cfg)
    assert s.class_score == 1.75
    assert s.separation == 0.0


def test_wildcat_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert wildcat_spatial_pool(m, WILDCAT11).class_score == 5.0
    no_bottom = PoolConfig(mode="wildcat", k_top=2, k_bot=1, alpha=0.0)
    assert wildcat_spatial_pool(m, no_bottom).class_score == 3.5
    const = wildcat_spatial_pool(np.full((3, 3), -2.5), WILDCAT11)
    assert const.class_score == -5.0
    assert const.separation == 0.0


def test_mode_mismatch_and_bad_k():
    m = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        weldon_pool(m, WILDCAT11)
    with pytest.raises(ConfigError):
        weldon_pool(m, PoolConfig(k_top=5, k_bot=1))
    with pytest.raises(ConfigError):
        PoolConfig(k_top=0)
    with pytest.raises(ConfigError):
        PoolConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        weldon_pool(np.zeros(4), WELDON11)


def test_default_k():
    assert default_k(64) == 6
    assert default_k(4) == 1
    assert PoolConfig().resolve(64) == (6, 6)


def test_ties_break_to_lowest_index():
    s = weldon_pool(np.array([[1.0, 5.0], [5.0, 1.0]]), WELDON11)
    assert s.top_idx.tolist() == [1]
    assert s.bottom_idx.tolist() == [0]


def test_mean_separation_variant():
    cfg = PoolConfig(k_top=2, k_bot=2, separation=SeparationKind.MEAN)
    s = weldon_pool(np.array([[0.0, 1.0], [3.0, 7.0]]), cfg)
    assert s.separation == (7 + 3) / 2 - (0 + 1) / 2


def test_class_pool():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 4, 4))
    assert np.array_equal(wildcat_class_pool(a, 1), a)
    pair = rng.normal(size=(2, 3, 3))
    assert np.allclose(wildcat_class_pool(pair, 2)[0], (pair[0] + pair[1]) / 2)
    raw = rng.normal(size=(6, 2, 2))
    out = wildcat_class_pool(raw, 3)
    for j in range(2):
        for h, w in itertools.product(range(2), range(2)):
            expect = (raw[3 * j, h, w] + raw[3 * j + 1, h, w] + raw[3 * j + 2, h, w]) / 3
            assert out[j, h, w] == pytest.approx(expect, rel=1e-15)
    with pytest.raises(ConfigError):
        wildcat_class_pool(raw, 4)


def test_backward_example_and_fd():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    s = weldon_pool(m, WELDON11)
    grad = pool_backward(s, 1.0)
    assert grad.ravel().tolist() == [0.5, 0.0, 0.0, 0.5]

    fd = central_difference(lambda v: weldon_pool(np.reshape(v, (2, 2)), WELDON11).class_score, m.ravel().tolist())
    assert np.allclose(grad.ravel(), fd, rtol=1e-4, atol=1e-9)
    assert not pool_backward(s, 0.0).any()

    s0 = wildcat_spatial_pool(m, PoolConfig(mode="wildcat", k_top=1, k_bot=1, alpha=0.0))
    g0 = pool_backward(s0, 1.0).ravel()
    assert g0[0] == 0.0 and g0[3] == 1.0


def test_backward_requires_forward_state():
    with pytest.raises(UsageError):
        pool_backward(ClassSummary(1.0, 0.0), 1.0)


def test_backward_random_fd_wildcat():
    rng = np.random.default_rng(11)
    cfg = PoolConfig(mode="wildcat", k_top=3, k_bot=2, alpha=0.7)
    for _ in range(20):
        m = rng.normal(size=(4, 5))
        s = wildcat_spatial_pool(m, cfg)
        fd = central_difference(
            lambda v: wildcat_spatial_pool(np.reshape(v, m.shape), cfg).class_score, m.ravel().tolist()
        )
        np.testing.assert_allclose(pool_backward(s, 1.3).ravel(), 1.3 * np.array(fd), rtol=1e-4, atol=1e-9)


def test_batched_matches_single():
    rng = np.random.default_rng(5)
    maps = rng.normal(size=(3, 4, 5, 5))
    cfg = PoolConfig(k_top=3, k_bot=2)
    batch = weldon_pool(maps, cfg)
    for i, j in itertools.product(range(3), range(4)):
        single = weldon_pool(maps[i, j], cfg)
        assert batch.class_score[i, j] == single.class_score
        assert batch.separation[i, j] == single.separation


def test_exhaustive_2x2_against_oracle():
    # the full <=3x3 sweep lives in the acceptance suite
    for values in itertools.product(range(-2, 3), repeat=4):
        m = np.array(values, dtype=float).reshape(2, 2)
        for kt, kb in itertools.product((1, 2), (1, 2)):
            score, sep, top, bottom = pool_oracle(list(map(float, values)), kt, kb, "weldon")
            s = weldon_pool(m, PoolConfig(k_top=kt, k_bot=kb))
            assert (s.class_score, s.separation) == (score, sep)
            assert s.top_idx.tolist() == top and s.bottom_idx.tolist() == bottom


@settings(max_examples=200, deadline=None)
@given(small_maps, st.floats(-100, 100, allow_nan=False))
def test_separation_nonneg_and_shift(m, c):
    cfg = PoolConfig(k_top=1, k_bot=1)
    s = weldon_pool(m, cfg)
    assert s.separation >= 0
    assert (s.separation == 0) == bool(np.all(m == m.flat[0]))
    shifted = weldon_pool(m + c, cfg)
    assert shifted.class_score == pytest.approx(s.class_score + c, abs=1e-9)
    assert shifted.separation == pytest.approx(s.separation, abs=1e-9)
    wcfg = PoolConfig(mode="wildcat", k_top=1, k_bot=1, alpha=0.6)
    w0, w1 = wildcat_spatial_pool(m, wcfg), wildcat_spatial_pool(m + c, wcfg)
    assert w1.class_score == pytest.approx(w0.class_score + 1.6 * c, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(small_maps, st.floats(0.01, 100))
def test_positive_scaling(m, scale):
    cfg = PoolConfig(k_top=1, k_bot=1)
    s, t = weldon_pool(m, cfg), weldon_pool(scale * m, cfg)
    assert t.class_score == pytest.approx(scale * s.class_score, rel=1e-9, abs=1e-9)
    assert t.separation == pytest.approx(scale * s.separation, rel=1e-9, abs=1e-9)
    if len(np.unique(scale * m)) == len(np.unique(m)):
        assert np.array_equal(s.top_idx, t.top_idx) and np.array_equal(s.bottom_idx, t.bottom_idx)


@settings(max_examples=100, deadline=None)
@given(small_maps)
def test_full_k_equals_mean(m):
    n = m.size
    s = weldon_pool(m, PoolConfig(k_top=n, k_bot=n))
    assert s.class_score == pytest.approx(m.mean(), abs=1e-9)
