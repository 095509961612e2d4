"""Spatio-temporal input embedding: projected history plus calendar and sensor identities."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from . import numerics as nx

DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class EmbeddingConfig:
    history: int
    n_points: int
    d_input: int = 128
    d_week: int = 32
    d_day: int = 32
    d_spatial: int = 32
    slices_per_day: int = 96
    days_per_week: int = DAYS_PER_WEEK

    def __post_init__(self):
        widths = (self.d_input, self.d_week, self.d_day, self.d_spatial)
        if min(widths) < 0 or sum(widths) <= 0:
            raise ValueError(f"embedding widths must be non-negative with a positive sum, got {widths}")
        if self.history < 1 or self.n_points < 1 or self.slices_per_day < 1:
            raise ValueError("history, n_points and slices_per_day must be positive")

    @property
    def d_model(self) -> int:
        return self.d_input + self.d_week + self.d_day + self.d_spatial


def slices_per_day(slice_minutes: int) -> int:
    if slice_minutes <= 0 or (24 * 60) % slice_minutes:
        raise ValueError(f"slice length of {slice_minutes} min does not tile a day")
    return (24 * 60) // slice_minutes


def time_indices(timestamp: dt.datetime, slice_minutes: int) -> tuple[int, int]:
    """(day-of-week with Monday = 0, slice-of-day) for a timestamp."""
    seconds = timestamp.hour * 3600 + timestamp.minute * 60 + timestamp.second
    return timestamp.weekday(), seconds // (slice_minutes * 60)


@dataclass(frozen=True, eq=False)
class EmbeddingTables:
    W_I: nx.Tensor
    b_I: nx.Tensor
    week: nx.Tensor
    day: nx.Tensor
    spatial: nx.Tensor

    @classmethod
    def from_store(cls, store: nx.ParamStore, prefix: str = "embed.") -> "EmbeddingTables":
        return cls(*(store[prefix + k] for k in ("W_I", "b_I", "week", "day", "spatial")))


def init_embedding(store: nx.ParamStore, cfg: EmbeddingConfig, rng: np.random.Generator, prefix: str = "embed.") -> EmbeddingTables:
    store.add(prefix + "W_I", nx.uniform_init(rng, (cfg.d_input, cfg.history), cfg.history))
    store.add(prefix + "b_I", nx.uniform_init(rng, (cfg.d_input,), cfg.history))
    store.add(prefix + "week", rng.normal(0.0, 1.0, (cfg.days_per_week, cfg.d_week)) * 0.1)
    store.add(prefix + "day", rng.normal(0.0, 1.0, (cfg.slices_per_day, cfg.d_day)) * 0.1)
    store.add(prefix + "spatial", rng.normal(0.0, 1.0, (cfg.n_points, cfg.d_spatial)) * 0.1)
    return EmbeddingTables.from_store(store, prefix)


def embed(window, day_of_week, slice_of_day, tables: EmbeddingTables, cfg: EmbeddingConfig) -> nx.Tensor:
    """Build the ``(B, N, d)`` embedding from ``(B, H, N)`` history windows.

    ``day_of_week`` and ``slice_of_day`` are per-sample indices of the last
    history slice. A single ``(H, N)`` window with scalar indices yields
    ``(1, N, d)``.
    """
    x = np.asarray(window.data if isinstance(window, nx.Tensor) else window)
    if x.ndim == 2:
        x = x[None]
    dow = np.atleast_1d(np.asarray(day_of_week, dtype=np.intp))
    tod = np.atleast_1d(np.asarray(slice_of_day, dtype=np.intp))
    b, h, n = x.shape
    if (h, n) != (cfg.history, cfg.n_points):
        raise ValueError(f"window shape {(h, n)} does not match config ({cfg.history}, {cfg.n_points})")
    if dow.shape != (b,) or tod.shape != (b,):
        raise ValueError("one day-of-week and one slice-of-day index per window are required")
    if dow.min() < 0 or dow.max() >= cfg.days_per_week:
        raise ValueError(f"day-of-week index outside 0..{cfg.days_per_week - 1}")
    if tod.min() < 0 or tod.max() >= cfg.slices_per_day:
        raise ValueError(f"slice-of-day index outside 0..{cfg.slices_per_day - 1}")

    parts = []
    if cfg.d_input:
        xt = nx.Tensor(np.swapaxes(x, 1, 2).astype(tables.W_I.dtype))  # (B, N, H)
        parts.append(nx.matmul(xt, nx.swapaxes(tables.W_I, 0, 1)) + tables.b_I)
    if cfg.d_week:
        parts.append(nx.take(tables.week, np.repeat(dow[:, None], n, axis=1), axis=0))
    if cfg.d_day:
        parts.append(nx.take(tables.day, np.repeat(tod[:, None], n, axis=1), axis=0))
    if cfg.d_spatial:
        parts.append(nx.take(tables.spatial, np.broadcast_to(np.arange(n), (b, n)), axis=0))
    return nx.concat(parts, axis=-1)


def embed_window(window, last_timestamp: dt.datetime, slice_minutes: int, tables: EmbeddingTables, cfg: EmbeddingConfig) -> nx.Tensor:
    """Embed one ``(H, N)`` window indexed by the calendar time of its last slice; returns ``(N, d)``."""
    if slices_per_day(slice_minutes) != cfg.slices_per_day:
        raise ValueError(f"{slice_minutes}-minute slices do not match a {cfg.slices_per_day}-entry day dictionary")
    dow, tod = time_indices(last_timestamp, slice_minutes)
    return embed(window, dow, tod, tables, cfg)[0]
