"""scikit-learn style wrappers around the partitioner and the forecaster."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import RawDataset
from .embedding import time_indices
from .spatial_index import apply_layout, make_layout, invert_layout
from .training import TrainConfig, evaluate, train
from .validation import check_coords, check_series, check_timestamps, check_windows


class LeafKDTreePatcher(TransformerMixin, BaseEstimator):
    """Learn a patch layout from sensor coordinates, then patch/unpatch feature rows.

    Parameters
    ----------
    capacity : int
        Maximum number of sensors per leaf.
    leaves_per_patch : int
        Sibling leaves merged into one patch (power of 2).
    padding : {"similarity", "distance", "zero"}
        How unfull leaves are topped up.
    spatial : bool
        If False, leaves follow the original index order instead of a KD-tree.
    """

    def __init__(self, capacity=2, leaves_per_patch=1, padding="similarity", spatial=True):
        self.capacity = capacity
        self.leaves_per_patch = leaves_per_patch
        self.padding = padding
        self.spatial = spatial

    def fit(self, X, y=None, series=None):
        """``X`` is ``(N, 2)`` (lat, lng); ``series`` the ``(T, N)`` training history."""
        coords = check_coords(X)
        if series is not None:
            series = check_series(series, coords.shape[0])
        self.tree_, self.layout_ = make_layout(
            coords, self.capacity, self.leaves_per_patch, train_series=series,
            padding=self.padding, spatial=self.spatial,
        )
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "layout_")
        return apply_layout(self.layout_, np.asarray(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "layout_")
        return invert_layout(self.layout_, np.asarray(X))


class PatchForecaster(BaseEstimator):
    """Train and apply the patched dual-attention forecaster.

    Constructor arguments are the :class:`~leafpatch.training.TrainConfig`
    fields that matter for a fitted model; ``fit`` receives a
    :class:`~leafpatch.data.RawDataset` instead of an ``(X, y)`` pair because
    the spatial layout needs coordinates and the full chronology.
    """

    def __init__(
        self,
        capacity=2,
        leaves_per_patch=0,
        n_patches=16,
        padding="similarity",
        spatial=True,
        d_input=128,
        d_week=32,
        d_day=32,
        d_spatial=32,
        n_heads=4,
        n_layers=5,
        encoder_mode="dual",
        residual=True,
        layernorm=True,
        normalize=True,
        lr=0.002,
        weight_decay=0.0001,
        epochs=50,
        batch_size=8,
        lr_milestones=(2, 35, 40),
        history=12,
        horizon=12,
        seed=0,
    ):
        self.capacity = capacity
        self.leaves_per_patch = leaves_per_patch
        self.n_patches = n_patches
        self.padding = padding
        self.spatial = spatial
        self.d_input = d_input
        self.d_week = d_week
        self.d_day = d_day
        self.d_spatial = d_spatial
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.encoder_mode = encoder_mode
        self.residual = residual
        self.layernorm = layernorm
        self.normalize = normalize
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_milestones = lr_milestones
        self.history = history
        self.horizon = horizon
        self.seed = seed

    def train_config(self) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in known})

    def fit(self, X: RawDataset, y=None):
        if not isinstance(X, RawDataset):
            raise TypeError("fit expects a RawDataset (values, coordinates and timestamps)")
        self.checkpoint_, self.log_ = train(self.train_config(), dataset=X)
        self.model_ = self.checkpoint_.model()
        self.slice_minutes_ = X.slice_minutes
        self.n_points_ = X.n_points
        return self

    def predict(self, X, last_timestamps) -> np.ndarray:
        """Forecast ``(B, F, N)`` from ``(B, H, N)`` histories ending at ``last_timestamps``."""
        check_is_fitted(self, "model_")
        windows = check_windows(X, self.n_points_, self.history)
        stamps = check_timestamps(last_timestamps, windows.shape[0])
        idx = np.array([time_indices(t, self.slice_minutes_) for t in stamps], dtype=np.intp)
        scaler = self.checkpoint_.scaler
        x = scaler.transform(windows) if scaler else windows
        pred = self.model_.predict(x, idx[:, 0], idx[:, 1])
        return scaler.inverse_transform(pred) if scaler else pred

    def score(self, X: RawDataset, y=None, split: str = "val") -> float:
        """Negative average MAE on a chronological split (greater is better)."""
        check_is_fitted(self, "model_")
        return -evaluate(self.checkpoint_, X, split).average[0]
