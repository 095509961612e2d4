"""Unpatch/unpad the encoder output and project it to the forecast horizon."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .spatial_index import PatchLayout, invert_layout


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    W_D: nx.Tensor  # (F, d)
    b_D: nx.Tensor  # (F,)

    @classmethod
    def from_store(cls, store: nx.ParamStore, prefix: str = "decoder.") -> "DecoderWeights":
        return cls(store[prefix + "W_D"], store[prefix + "b_D"])


def init_decoder(store: nx.ParamStore, horizon: int, d_model: int, rng: np.random.Generator, prefix: str = "decoder.") -> DecoderWeights:
    store.add(prefix + "W_D", nx.uniform_init(rng, (horizon, d_model), d_model))
    store.add(prefix + "b_D", np.zeros(horizon))
    return DecoderWeights.from_store(store, prefix)


def decode(x_enc, layout: PatchLayout, w: DecoderWeights, scaler=None) -> nx.Tensor:
    """``(B, R, P, d)`` encoder output to a ``(B, F, N)`` forecast in original sensor order.

    With a fitted ``scaler`` the forecast is mapped back to data units.
    """
    x_enc = nx.as_tensor(x_enc)
    rows = invert_layout(layout, x_enc)  # (B, N, d)
    if rows.shape[-1] != w.W_D.shape[1]:
        raise ValueError(f"encoder width {rows.shape[-1]} does not match decoder width {w.W_D.shape[1]}")
    pred = nx.add(nx.matmul(rows, nx.swapaxes(w.W_D, 0, 1)), w.b_D)  # (B, N, F)
    pred = nx.swapaxes(pred, -1, -2)
    if scaler is not None:
        pred = nx.add(nx.scale(pred, scaler.std), scaler.mean)
    return pred


def l1_loss(pred, target) -> nx.Tensor:
    """Mean absolute error over every entry (zero subgradient at exact ties)."""
    return nx.l1_mean(pred, nx.as_tensor(target))
