import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from leafpatch import LeafKDTreePatcher, PatchForecaster
from leafpatch.data import chronological_split, synth_generate, windows
from leafpatch.spatial_index import leaf_order


def test_patcher_params_and_clone():
    est = LeafKDTreePatcher(capacity=3, leaves_per_patch=2, padding="zero")
    assert est.get_params() == {"capacity": 3, "leaves_per_patch": 2, "padding": "zero", "spatial": True}
    assert clone(est).get_params() == est.get_params()


def test_patcher_round_trip(rng):
    coords = rng.uniform(size=(11, 2))
    est = LeafKDTreePatcher(capacity=2, leaves_per_patch=2).fit(coords, series=rng.standard_normal((20, 11)))
    x = rng.standard_normal((11, 3))
    patched = est.transform(x)
    assert patched.shape == (est.layout_.R, est.layout_.P, 3)
    assert np.array_equal(est.inverse_transform(patched), x)
    assert est.layout_.new_order[0] == leaf_order(est.tree_)[0]


def test_patcher_validation(rng):
    with pytest.raises(NotFittedError):
        LeafKDTreePatcher().transform(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        LeafKDTreePatcher().fit(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        LeafKDTreePatcher().fit(rng.uniform(size=(4, 2)), series=np.zeros((5, 3)))


def test_forecaster_fit_predict_score():
    ds = synth_generate(0, 16, 6, slice_minutes=60)
    est = PatchForecaster(capacity=2, leaves_per_patch=2, d_input=8, d_week=4, d_day=4, d_spatial=0, n_heads=2,
                          n_layers=1, epochs=2, batch_size=16)
    assert clone(est).get_params() == est.get_params()
    est.fit(ds)
    val = chronological_split(ds)[1]
    batch = list(windows(val))[:3]
    pred = est.predict(np.stack([w.history for w in batch]), [w.last_timestamp for w in batch])
    assert pred.shape == (3, 12, 16)
    assert est.score(ds) == pytest.approx(-min(r.val_mae for r in est.log_.rows), rel=1e-12)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 12, 15)), [batch[0].last_timestamp])


def test_forecaster_requires_dataset():
    with pytest.raises(TypeError):
        PatchForecaster().fit(np.zeros((10, 3)))
