import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaprune.errors import ShapeError
from gaprune.fitness import (
    batch_taylor_error,
    channel_quadratic,
    compute_hessian,
    direct_error,
    load_hessian,
    population_fitness,
    save_hessian,
    taylor_error,
)
from gaprune.sampler import VolumeSet


def make_volumes(x, w, b=None, layer_id="conv"):
    x = np.asarray(x, dtype=np.float64)
    w2 = np.asarray(w, dtype=np.float64).reshape(np.shape(w)[0], -1)
    y = x @ w2.T + (0.0 if b is None else np.asarray(b, dtype=np.float64))
    return VolumeSet(x, y, layer_id, np.zeros((len(x), 3), np.int64))


def random_fixture(seed, c=6, f=5, k=3, n=500):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(f, c, k, k))
    scales = np.repeat(rng.uniform(0.2, 2.0, c), k * k)
    x = rng.normal(size=(n, c * k * k)) * scales
    b = rng.normal(size=f)
    return make_volumes(x, w, b), w, b


# Hessian -------------------------------------------------------------------


def test_hessian_single_volume():
    h = compute_hessian(make_volumes([[1.0, 0.0]], [[1.0, 1.0]]))
    np.testing.assert_array_equal(h.matrix, [[1.0, 0.0], [0.0, 0.0]])
    assert h.sample_count == 1 and h.dim == 2


def test_hessian_unit_vectors():
    h = compute_hessian(make_volumes(np.eye(2), [[1.0, 1.0]]))
    np.testing.assert_array_equal(h.matrix, 0.5 * np.eye(2))


def test_hessian_matches_naive_outer_product_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 12))
    naive = np.zeros((12, 12))
    for row in x:
        for i in range(12):
            for j in range(12):
                naive[i, j] += row[i] * row[j]
    naive /= 200
    h = compute_hessian(make_volumes(x, rng.normal(size=(2, 12)))).matrix
    assert np.abs(h - naive).max() <= 1e-12 * np.abs(naive).max()


def test_hessian_symmetric_and_psd():
    vs, _, _ = random_fixture(1)
    h = compute_hessian(vs).matrix
    np.testing.assert_array_equal(h, h.T)
    eig = np.linalg.eigvalsh(h)
    assert eig.min() >= -1e-8 * eig.max()


def test_hessian_dimension_check():
    vs, _, _ = random_fixture(2, c=2, k=1)
    with pytest.raises(ShapeError):
        compute_hessian(vs, expected_dim=5)


# errors --------------------------------------------------------------------


def test_taylor_hand_example():
    h = np.array([[2.0, 0.0], [0.0, 4.0]])
    w = np.array([[1.0, 2.0]]).reshape(1, 2, 1, 1)
    assert taylor_error(h, w, [1, 0]) == pytest.approx(8.0)
    assert taylor_error(h, w, [1, 1]) == 0.0
    assert taylor_error(h, w, [0, 0]) == pytest.approx(0.5 * (2 * 1 + 4 * 4))


def test_direct_error_hand_example():
    w = np.array([[1.0, 2.0]]).reshape(1, 2, 1, 1)
    vs = make_volumes([[1.0, 2.0]], w)
    assert direct_error(vs, w, None, [1, 0]) == pytest.approx(16.0)
    assert taylor_error(compute_hessian(vs), w, [1, 0]) == pytest.approx(8.0)
    assert direct_error(vs, w, None, [1, 1]) == 0.0


def test_error_dimension_mismatch():
    vs, w, b = random_fixture(3)
    with pytest.raises(ShapeError):
        taylor_error(np.eye(4), w, np.ones(6))
    with pytest.raises(ShapeError):
        taylor_error(compute_hessian(vs), w, np.ones(4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(1, 8), k=st.sampled_from([1, 2, 3]),
       data=st.data())
def test_direct_equals_twice_taylor(seed, c, k, data):
    vs, w, b = random_fixture(seed, c=c, f=3, k=k, n=60)
    mask = np.array(data.draw(st.lists(st.integers(0, 1), min_size=c, max_size=c)))
    h = compute_hessian(vs)
    e, de = direct_error(vs, w, b, mask), taylor_error(h, w, mask)
    assert de >= 0
    assert e == pytest.approx(2 * de, rel=1e-9, abs=1e-12)


def test_ranking_equivalence_and_monotone_extension():
    vs, w, b = random_fixture(4, c=6)
    h = compute_hessian(vs)
    masks = [np.array(m) for m in itertools.product([0, 1], repeat=6)]
    d = np.array([direct_error(vs, w, b, m) for m in masks])
    t = np.array([taylor_error(h, w, m) for m in masks])
    # sorting by the approximation sorts the exact errors too (up to rounding)
    assert np.all(np.diff(d[np.argsort(t)]) >= -1e-9 * d.max())
    for m, tm in zip(masks, t):
        for ch in np.flatnonzero(m):
            m2 = m.copy()
            m2[ch] = 0
            assert taylor_error(h, w, m2) >= tm - 1e-12


def test_channel_quadratic_matches_taylor():
    vs, w, b = random_fixture(5, c=7)
    h = compute_hessian(vs)
    q = channel_quadratic(h, w)
    rng = np.random.default_rng(0)
    masks = rng.integers(0, 2, (30, 7))
    want = [taylor_error(h, w, m) for m in masks]
    np.testing.assert_allclose(batch_taylor_error(q, masks), want, rtol=1e-10)


# fitness scaling -------------------------------------------------------------


def test_population_fitness_examples():
    np.testing.assert_array_equal(population_fitness([8, 8]), [1.0, 1.0])
    f = population_fitness([0, 10])
    np.testing.assert_allclose(f, [10.1, 0.1])
    assert f[0] / f.sum() == pytest.approx(0.990, abs=5e-4)
    assert population_fitness([3.0]).tolist() == [1.0]
    with pytest.raises(ValueError):
        population_fitness([1.0, np.nan])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30))
def test_fitness_preserves_argmin(errors):
    f = population_fitness(errors)
    assert np.all(f >= 0) and f.sum() > 0
    spread = max(errors) - min(errors)
    assert errors[int(np.argmax(f))] <= min(errors) + 1e-12 * (spread + 1.0)


def test_hessian_roundtrip(tmp_path):
    vs, _, _ = random_fixture(6, c=3)
    h = compute_hessian(vs)
    save_hessian(h, tmp_path / "h")
    back = load_hessian(tmp_path / "h")
    assert back.layer_id == h.layer_id and back.sample_count == h.sample_count
    np.testing.assert_array_equal(back.matrix, back.matrix.T)
    np.testing.assert_allclose(back.matrix, h.matrix, rtol=1e-6)
