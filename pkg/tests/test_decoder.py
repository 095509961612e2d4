import numpy as np
import pytest

from leafpatch import numerics as nx
from leafpatch.data import ZScore
from leafpatch.decoder import DecoderWeights, decode, init_decoder, l1_loss
from leafpatch.spatial_index import make_layout


@pytest.fixture
def setup(rng):
    _, layout = make_layout(rng.uniform(size=(11, 2)), 2, 2, train_series=rng.standard_normal((6, 11)))
    store = nx.ParamStore()
    w = init_decoder(store, 3, 5, rng)
    return layout, store, w


def test_shape_and_projection(rng, setup):
    layout, _, w = setup
    x = rng.standard_normal((2, layout.R, layout.P, 5))
    out = decode(x, layout, w).data
    assert out.shape == (2, 3, 11)
    rows = x.reshape(2, layout.M, 5)[:, layout.home_slots]
    np.testing.assert_allclose(out, np.swapaxes(rows @ w.W_D.data.T + w.b_D.data, 1, 2), atol=1e-12)


def test_zero_weights_emit_bias(rng, setup):
    layout, store, _ = setup
    store.set_value("decoder.W_D", np.zeros((3, 5)))
    store.set_value("decoder.b_D", np.array([1.0, -2.0, 0.5]))
    out = decode(rng.standard_normal((1, layout.R, layout.P, 5)), layout, DecoderWeights.from_store(store)).data
    np.testing.assert_array_equal(out[0], np.repeat([[1.0], [-2.0], [0.5]], 11, axis=1))


def test_padded_slots_are_ignored(rng, setup):
    layout, _, w = setup
    assert layout.n_padded > 0
    x = rng.standard_normal((1, layout.M, 5))
    y = x.copy()
    y[:, layout.padded_slots] = 1e6
    shape = (1, layout.R, layout.P, 5)
    assert np.array_equal(decode(x.reshape(shape), layout, w).data, decode(y.reshape(shape), layout, w).data)


def test_scaler_maps_back(rng, setup):
    layout, _, w = setup
    scaler = ZScore().fit(np.array([10.0, 20.0, 30.0]))
    x = rng.standard_normal((1, layout.R, layout.P, 5))
    np.testing.assert_allclose(decode(x, layout, w, scaler).data, decode(x, layout, w).data * scaler.std + scaler.mean)


def test_width_mismatch(rng, setup):
    layout, _, w = setup
    with pytest.raises(ValueError, match="width"):
        decode(rng.standard_normal((1, layout.R, layout.P, 4)), layout, w)


def test_l1_oracle(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    assert float(l1_loss(a, b).data) == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-14)


def test_l1_gradient_sign(rng):
    p = nx.Tensor(np.array([1.0, -1.0, 2.0, 0.0]), requires_grad=True)
    (g,) = nx.grad(l1_loss(p, np.array([0.0, 0.0, 3.0, 0.0])), [p])
    np.testing.assert_array_equal(g, [0.25, -0.25, -0.25, 0.0])
