"""The full forecaster: embedding, patching, dual attention encoder, decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .attention import EncoderConfig, encode, encoder_from_store, init_encoder
from .decoder import DecoderWeights, decode, init_decoder
from .embedding import EmbeddingConfig, EmbeddingTables, embed, init_embedding
from .spatial_index import PatchLayout, apply_layout


@dataclass(frozen=True)
class ModelConfig:
    n_points: int
    history: int = 12
    horizon: int = 12
    d_input: int = 128
    d_week: int = 32
    d_day: int = 32
    d_spatial: int = 32
    slices_per_day: int = 96
    n_heads: int = 4
    n_layers: int = 5
    residual: bool = True
    layernorm: bool = True
    encoder_mode: str = "dual"

    @property
    def d_model(self) -> int:
        return self.d_input + self.d_week + self.d_day + self.d_spatial

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(
            history=self.history,
            n_points=self.n_points,
            d_input=self.d_input,
            d_week=self.d_week,
            d_day=self.d_day,
            d_spatial=self.d_spatial,
            slices_per_day=self.slices_per_day,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            residual=self.residual,
            layernorm=self.layernorm,
            mode=self.encoder_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class PatchForecastModel:
    """Parameters plus a differentiable forward pass over batches of windows.

    Works in whatever units the caller feeds; normalisation lives outside.
    """

    def __init__(self, cfg: ModelConfig, layout: PatchLayout, store: nx.ParamStore | None = None, seed: int = 0, dtype=np.float64):
        if layout.n_points != cfg.n_points:
            raise ValueError(f"layout covers {layout.n_points} points, model expects {cfg.n_points}")
        self.cfg = cfg
        self.layout = layout
        self.emb_cfg = cfg.embedding_config()
        self.enc_cfg = cfg.encoder_config()
        if store is None:
            rng = np.random.default_rng(seed)
            store = nx.ParamStore()
            init_embedding(store, self.emb_cfg, rng)
            init_encoder(store, self.enc_cfg, rng)
            init_decoder(store, cfg.horizon, cfg.d_model, rng)
            if dtype != np.float64:
                for name in store.names():
                    store.set_value(name, store[name].data.astype(dtype))
                    store.m[name] = store.m[name].astype(dtype)
                    store.v[name] = store.v[name].astype(dtype)
        self.store = store

    def forward(self, history, day_of_week, slice_of_day, record: list | None = None) -> nx.Tensor:
        """``(B, H, N)`` windows to ``(B, F, N)`` forecasts."""
        tables = EmbeddingTables.from_store(self.store)
        x = embed(history, day_of_week, slice_of_day, tables, self.emb_cfg)
        patched = apply_layout(self.layout, x)
        layers = encoder_from_store(self.store, self.enc_cfg)
        encoded = encode(patched, layers, self.enc_cfg, record=record)
        return decode(encoded, self.layout, DecoderWeights.from_store(self.store))

    def predict(self, history, day_of_week, slice_of_day, batch_size: int = 64) -> np.ndarray:
        history = np.asarray(history)
        if history.ndim == 2:
            history = history[None]
        dow = np.atleast_1d(day_of_week)
        tod = np.atleast_1d(slice_of_day)
        dtype = self.store[self.store.names()[0]].dtype
        out = []
        for a in range(0, history.shape[0], batch_size):
            sl = slice(a, a + batch_size)
            out.append(self.forward(history[sl].astype(dtype), dow[sl], tod[sl]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.horizon, self.cfg.n_points))
