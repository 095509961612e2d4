import datetime as dt

import numpy as np
import pytest

from leafpatch import numerics as nx
from leafpatch.embedding import EmbeddingConfig, EmbeddingTables, embed, init_embedding, slices_per_day, time_indices
from conftest import numeric_grad, rel_error


def make(rng, **kw):
    cfg = EmbeddingConfig(**{"history": 4, "n_points": 5, "d_input": 3, "d_week": 2, "d_day": 2, "d_spatial": 2, "slices_per_day": 6, **kw})
    store = nx.ParamStore()
    return cfg, store, init_embedding(store, cfg, rng)


def test_default_width():
    assert EmbeddingConfig(history=12, n_points=10).d_model == 224


def test_slices_per_day():
    assert slices_per_day(15) == 96
    # 35040 samples across 365 days
    assert 35040 // 365 == slices_per_day(15)
    with pytest.raises(ValueError):
        slices_per_day(7)


def test_time_indices():
    dow, tod = time_indices(dt.datetime(2019, 1, 1, 1, 0), 15)
    assert (dow, tod) == (1, 4)
    assert time_indices(dt.datetime(2019, 1, 6, 23, 59), 15) == (6, 95)


def test_row_layout_matches_hand_built(rng):
    cfg, _, tables = make(rng)
    x = rng.standard_normal((2, 4, 5))
    dow, tod = np.array([3, 0]), np.array([5, 1])
    out = embed(x, dow, tod, tables, cfg).data
    assert out.shape == (2, 5, cfg.d_model)
    for b in range(2):
        for n in range(5):
            expected = np.concatenate([
                tables.W_I.data @ x[b, :, n] + tables.b_I.data,
                tables.week.data[dow[b]],
                tables.day.data[tod[b]],
                tables.spatial.data[n],
            ])
            np.testing.assert_allclose(out[b, n], expected, atol=1e-12)


def test_zero_projection_zeroes_input_part(rng):
    cfg, store, _ = make(rng)
    store.set_value("embed.W_I", np.zeros((3, 4)))
    store.set_value("embed.b_I", np.zeros(3))
    out = embed(rng.standard_normal((4, 5)), 2, 3, EmbeddingTables.from_store(store), cfg).data
    assert np.all(out[..., :3] == 0)
    assert np.all(out[..., 3:] != 0)


def test_single_window_shape(rng):
    cfg, _, tables = make(rng)
    assert embed(np.zeros((4, 5)), 0, 0, tables, cfg).shape == (1, 5, 9)


def test_permutation_equivariance(rng):
    cfg, store, tables = make(rng)
    x = rng.standard_normal((1, 4, 5))
    perm = rng.permutation(5)
    out = embed(x, 1, 1, tables, cfg).data
    store.set_value("embed.spatial", store["embed.spatial"].data[perm])
    permuted = embed(x[:, :, perm], 1, 1, EmbeddingTables.from_store(store), cfg).data
    np.testing.assert_array_equal(permuted, out[:, perm])


@pytest.mark.parametrize("bad", [dict(dow=7), dict(tod=6), dict(dow=-1)])
def test_index_range(rng, bad):
    cfg, _, tables = make(rng)
    with pytest.raises(ValueError):
        embed(np.zeros((4, 5)), bad.get("dow", 0), bad.get("tod", 0), tables, cfg)


def test_shape_mismatch(rng):
    cfg, _, tables = make(rng)
    with pytest.raises(ValueError, match="window shape"):
        embed(np.zeros((3, 5)), 0, 0, tables, cfg)


def test_gradients(rng):
    cfg, store, _ = make(rng)
    x = rng.standard_normal((2, 4, 5))
    weights = rng.standard_normal((2, 5, cfg.d_model))

    def loss():
        return nx.total(nx.mul(embed(x, np.array([1, 6]), np.array([0, 5]), EmbeddingTables.from_store(store), cfg), weights))

    grads = nx.backward(loss(), store)
    for name in store.names():
        num = numeric_grad(lambda: float(loss().data), store[name].data)
        assert rel_error(grads[name], num) < 1e-6, name


def test_embed_window_from_timestamp(rng):
    from leafpatch.embedding import embed_window

    cfg, _, tables = make(rng)  # 6 slices per day -> 4-hour slices
    x = rng.standard_normal((4, 5))
    stamp = dt.datetime(2019, 1, 3, 9, 30)  # Thursday, slice 2
    out = embed_window(x, stamp, 240, tables, cfg).data
    np.testing.assert_array_equal(out, embed(x, 3, 2, tables, cfg).data[0])
    with pytest.raises(ValueError, match="day dictionary"):
        embed_window(x, stamp, 60, tables, cfg)
