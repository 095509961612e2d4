"""Depth (within-patch) and breadth (across-patch) multi-head attention encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx

ENCODER_MODES = ("dual", "depth", "breadth", "none")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 5
    n_heads: int = 4
    d_model: int = 224
    residual: bool = True
    layernorm: bool = True
    mode: str = "dual"

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"model width {self.d_model} is not divisible by {self.n_heads} heads")
        if self.n_layers < 1 and self.mode != "none":
            raise ValueError("at least one encoder layer is required")
        if self.mode not in ENCODER_MODES:
            raise ValueError(f"encoder mode must be one of {ENCODER_MODES}, got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Per-head projections stored side by side: head i owns columns i*d/o:(i+1)*d/o."""

    W_Q: nx.Tensor
    W_K: nx.Tensor
    W_V: nx.Tensor
    W_O: nx.Tensor

    @classmethod
    def from_store(cls, store: nx.ParamStore, prefix: str) -> "AttentionWeights":
        return cls(*(store[prefix + k] for k in ("W_Q", "W_K", "W_V", "W_O")))


@dataclass(frozen=True, eq=False)
class LayerWeights:
    depth: AttentionWeights | None
    breadth: AttentionWeights | None


def init_attention(store: nx.ParamStore, prefix: str, d_model: int, rng: np.random.Generator) -> AttentionWeights:
    for key in ("W_Q", "W_K", "W_V", "W_O"):
        store.add(prefix + key, nx.uniform_init(rng, (d_model, d_model), d_model))
    return AttentionWeights.from_store(store, prefix)


def init_encoder(store: nx.ParamStore, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder.") -> list[LayerWeights]:
    if cfg.mode == "none":
        return []
    layers = []
    for l in range(cfg.n_layers):
        depth = init_attention(store, f"{prefix}{l}.depth.", cfg.d_model, rng) if cfg.mode in ("dual", "depth") else None
        breadth = init_attention(store, f"{prefix}{l}.breadth.", cfg.d_model, rng) if cfg.mode in ("dual", "breadth") else None
        layers.append(LayerWeights(depth, breadth))
    return layers


def encoder_from_store(store: nx.ParamStore, cfg: EncoderConfig, prefix: str = "encoder.") -> list[LayerWeights]:
    if cfg.mode == "none":
        return []
    layers = []
    for l in range(cfg.n_layers):
        d = f"{prefix}{l}.depth."
        b = f"{prefix}{l}.breadth."
        layers.append(
            LayerWeights(
                AttentionWeights.from_store(store, d) if d + "W_Q" in store else None,
                AttentionWeights.from_store(store, b) if b + "W_Q" in store else None,
            )
        )
    return layers


def multi_head_attention(
    x: nx.Tensor,
    w: AttentionWeights,
    n_heads: int,
    residual: bool = False,
    layernorm: bool = False,
    record: list | None = None,
) -> nx.Tensor:
    """Scaled dot-product attention among the rows of axis -2, independently for every leading index."""
    x = nx.as_tensor(x)
    *lead, t, d = x.shape
    if d % n_heads:
        raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    k = len(lead)
    split = lambda z: nx.transpose(nx.reshape(z, (*lead, t, n_heads, dh)), (*range(k), k + 1, k, k + 2))
    q = split(nx.matmul(x, w.W_Q))
    key = split(nx.matmul(x, w.W_K))
    v = split(nx.matmul(x, w.W_V))
    with nx.flop_tag("attention"):
        logits = nx.scale(nx.matmul(q, nx.swapaxes(key, -1, -2)), 1.0 / math.sqrt(dh))
        weights = nx.softmax_last(logits)
        heads = nx.matmul(weights, v)  # (..., o, t, dh)
    if record is not None:
        record.append(weights.data)
    merged = nx.reshape(nx.transpose(heads, (*range(k), k + 1, k, k + 2)), (*lead, t, d))
    out = nx.matmul(merged, w.W_O)
    if residual:
        out = nx.add(out, x)
    if layernorm:
        out = nx.layer_norm(out)
    return out


def depth_attention(x, w: AttentionWeights, n_heads: int, residual=False, layernorm=False, record=None) -> nx.Tensor:
    """Attention among the P slots of each patch; input and output are ``(..., R, P, d)``."""
    return multi_head_attention(x, w, n_heads, residual, layernorm, record)


def breadth_attention(x, w: AttentionWeights, n_heads: int, residual=False, layernorm=False, record=None) -> nx.Tensor:
    """Attention among the R patches at each fixed slot index; ``(..., R, P, d)`` in and out."""
    swapped = nx.swapaxes(nx.as_tensor(x), -3, -2)
    out = multi_head_attention(swapped, w, n_heads, residual, layernorm, record)
    return nx.swapaxes(out, -3, -2)


def encode(x, layers: list[LayerWeights], cfg: EncoderConfig, record: list | None = None) -> nx.Tensor:
    if cfg.mode != "none" and len(layers) != cfg.n_layers:
        raise ValueError(f"expected {cfg.n_layers} layers, got {len(layers)}")
    out = nx.as_tensor(x)
    opts = dict(residual=cfg.residual, layernorm=cfg.layernorm)
    for layer in layers:
        if layer.depth is not None:
            out = depth_attention(out, layer.depth, cfg.n_heads, record=record, **opts)
        if layer.breadth is not None:
            out = breadth_attention(out, layer.breadth, cfg.n_heads, record=record, **opts)
    return out


def dual_layer_core_flops(n_patches: int, patch_size: int, d_model: int) -> int:
    """Score and mixing FLOPs of one depth+breadth layer: 4(R P^2 d + P R^2 d)."""
    r, p = n_patches, patch_size
    return 4 * (r * p * p * d_model + p * r * r * d_model)


def save_attention_maps(path, maps: list[np.ndarray]) -> None:
    """Dump recorded attention matrices (depth maps are R x o x P x P, breadth P x o x R x R)."""
    np.savez(path, **{f"map_{i:03d}": m for i, m in enumerate(maps)})
