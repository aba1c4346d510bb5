import itertools

import numpy as np
import pytest

from tuckerq.conv import ConvSpec
from tuckerq.tensor import mode_unfold, multilinear_product
from tuckerq.tucker import (
    TuckerFactors,
    hooi,
    hosvd,
    macs_compression_ratio,
    param_compression_ratio,
    partial_tucker2,
    reconstruct,
    tucker_compression_ratio,
)

from conftest import rel


def orthonormal(rng, n, r):
    return np.linalg.qr(rng.standard_normal((n, r)))[0]


def low_rank(rng, shape, rank):
    core = rng.standard_normal(rank)
    return multilinear_product(core, [orthonormal(rng, i, r) for i, r in zip(shape, rank)])


def test_exact_rank_recovery(rng):
    t = low_rank(rng, (5, 6, 7), (2, 2, 2))
    f = hooi(t, (2, 2, 2))
    assert rel(reconstruct(f), t) < 1e-8
    assert f.rank == (2, 2, 2)


def test_full_rank_exact(rng):
    t = rng.standard_normal((3, 4, 5))
    assert rel(reconstruct(hooi(t, t.shape)), t) < 1e-10


def test_hooi_beats_hosvd_and_respects_bounds(rng):
    t = rng.standard_normal((6, 6, 6))
    f = hooi(t, (3, 3, 3), tol=0, max_iters=100)
    h = hosvd(t, (3, 3, 3))
    e_hooi = np.linalg.norm(t - reconstruct(f))
    e_hosvd = np.linalg.norm(t - reconstruct(h))
    assert e_hooi <= e_hosvd + 1e-12
    discarded = [np.sum(np.linalg.svd(mode_unfold(t, n), compute_uv=False)[3:] ** 2) for n in range(3)]
    assert e_hooi ** 2 >= max(discarded) - 1e-10
    assert e_hosvd ** 2 <= sum(discarded) + 1e-10


def test_error_history_monotone_and_orthonormal(rng):
    t = rng.standard_normal((5, 6, 4, 3))
    f = hooi(t, (2, 3, 2, 2), tol=0, max_iters=30)
    assert np.all(np.diff(f.errors) <= 1e-12)
    for u in f.factors:
        np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-8)
    # Pythagoras under orthonormal factors
    err = np.linalg.norm(t - reconstruct(f))
    assert np.linalg.norm(t) ** 2 == pytest.approx(np.linalg.norm(f.core) ** 2 + err ** 2, rel=1e-8)
    np.testing.assert_allclose(f.core, multilinear_product(t, [u.T for u in f.factors]), atol=1e-12)


def test_hooi_errors(rng):
    t = rng.standard_normal((3, 3, 3))
    with pytest.raises(ValueError):
        hooi(t, (4, 2, 2))
    with pytest.raises(ValueError):
        hooi(t, (0, 2, 2))
    with pytest.raises(ValueError):
        hooi(t, (2, 2))
    with pytest.raises(ValueError):
        hooi(t, (2, 2, 2), max_iters=0)


def test_reconstruct_identity_and_naive(rng):
    core = rng.standard_normal((2, 2, 2))
    f = TuckerFactors(core, [np.eye(2)] * 3, (0, 1, 2))
    np.testing.assert_array_equal(reconstruct(f), core)
    fs = [rng.standard_normal((3, 2)) for _ in range(3)]
    expected = np.zeros((3, 3, 3))
    for i, j, k, a, b, c in itertools.product(*[range(3)] * 3, *[range(2)] * 3):
        expected[i, j, k] += core[a, b, c] * fs[0][i, a] * fs[1][j, b] * fs[2][k, c]
    np.testing.assert_allclose(reconstruct(TuckerFactors(core, fs, (0, 1, 2))), expected, rtol=1e-12)
    with pytest.raises(ValueError):
        reconstruct(TuckerFactors(core, [np.eye(3)] * 3, (0, 1, 2)))


def test_partial_tucker2_full_and_exact_rank(rng):
    k = rng.standard_normal((3, 3, 5, 7))
    assert rel(partial_tucker2(k, 5, 7).reconstruct(), k) < 1e-10
    core = rng.standard_normal((3, 3, 2, 3))
    k2 = multilinear_product(core, [orthonormal(rng, 5, 2), orthonormal(rng, 7, 3)], (2, 3))
    f = partial_tucker2(k2, 2, 3)
    assert rel(f.reconstruct(), k2) < 1e-8
    assert f.core.shape == (3, 3, 2, 3)
    np.testing.assert_allclose(f.u3.T @ f.u3, np.eye(2), atol=1e-8)
    with pytest.raises(ValueError):
        partial_tucker2(k, 6, 2)


def test_partial_matches_full_hooi(rng):
    k = rng.standard_normal((3, 3, 8, 16))
    a = partial_tucker2(k, 4, 8)
    b = hooi(k, (3, 3, 4, 8))
    ea = np.linalg.norm(k - a.reconstruct())
    eb = np.linalg.norm(k - reconstruct(b))
    assert abs(ea - eb) <= 1e-8 * np.linalg.norm(k)
    assert np.all(np.diff(a.errors) <= 1e-12)


def test_tucker_compression_ratio():
    assert tucker_compression_ratio((10, 10, 10), (10, 10, 10)) == pytest.approx(1000 / 1300)
    assert tucker_compression_ratio((64, 64, 64), (8, 8, 8)) == 128.0
    shape = (6, 5, 4)
    for n in range(3):
        vals = []
        for r in range(1, shape[n] + 1):
            rank = [2, 2, 2]
            rank[n] = r
            vals.append(tucker_compression_ratio(shape, rank))
        assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        tucker_compression_ratio((3, 3), (4, 1))


def test_param_ratio():
    spec = ConvSpec((3, 3, 64, 64))
    assert param_compression_ratio(spec, 32, 32) == 36864 / 13312
    assert param_compression_ratio(spec, 64, 64) < 1
    one = ConvSpec((1, 1, 10, 12))
    assert param_compression_ratio(one, 3, 4) == 120 / (12 + 30 + 48)


def test_param_ratio_matches_materialized(rng):
    k = rng.standard_normal((3, 3, 6, 5))
    f = partial_tucker2(k, 3, 2)
    n = f.core.size + f.u3.size + f.u4.size
    assert param_compression_ratio(ConvSpec(k.shape), 3, 2) == k.size / n


def test_macs_ratio():
    spec = ConvSpec((3, 3, 64, 64), stride=2, padding=1)
    assert macs_compression_ratio(spec, (32, 32), (16, 16), 32, 32) == 36864 / 19456
    same = ConvSpec((3, 3, 64, 64), 1, 1)
    assert macs_compression_ratio(same, (16, 16), (16, 16), 20, 24) == param_compression_ratio(same, 20, 24)
    assert macs_compression_ratio(spec, (32, 32), (16, 16), 20, 24) <= param_compression_ratio(spec, 20, 24)


def test_rank_exceeding_other_modes(rng):
    # 1x1 kernel: the channel-mode rank can exceed D^2 times the other rank
    k = rng.standard_normal((1, 1, 5, 3))
    f = partial_tucker2(k, 5, 1)
    assert f.core.shape == (1, 1, 5, 1)
    np.testing.assert_allclose(f.u3.T @ f.u3, np.eye(5), atol=1e-12)
    best = np.linalg.svd(k.reshape(5, 3), compute_uv=False)
    err = np.linalg.norm(k - f.reconstruct()) ** 2
    assert err == pytest.approx(np.sum(best[1:] ** 2), rel=1e-8)
