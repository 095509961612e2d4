"""Dataset files, chronological splits, forecast windows, metrics and a synthetic generator."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DATA_MAGIC = b"PSTD1"
SPLIT_RATIOS = (0.6, 0.2, 0.2)
HORIZONS = (3, 6, 12)
MAPE_MASK = 1e-3


@dataclass(eq=False)
class RawDataset:
    values: np.ndarray  # (T, N)
    lat: np.ndarray
    lng: np.ndarray
    start_time: dt.datetime
    slice_minutes: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lng = np.asarray(self.lng, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be a (T, N) matrix, got shape {self.values.shape}")
        n = self.values.shape[1]
        if self.lat.shape != (n,) or self.lng.shape != (n,):
            raise ValueError(f"coordinate count ({self.lat.size}, {self.lng.size}) does not match {n} sensors")
        if self.slice_minutes <= 0:
            raise ValueError("slice_minutes must be positive")

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lat, self.lng])

    def timestamp(self, t: int) -> dt.datetime:
        return self.start_time + dt.timedelta(minutes=self.slice_minutes * int(t))


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def save_dataset(ds: RawDataset, path) -> None:
    """Write ``meta.txt``, ``points.csv`` and ``values.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "meta.txt"), "w") as fh:
        fh.write(f"start_time={ds.start_time.isoformat()}\n")
        fh.write(f"slice_minutes={ds.slice_minutes}\n")
    with open(os.path.join(path, "points.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "lat", "lng"])
        for i, (a, b) in enumerate(zip(ds.lat, ds.lng)):
            writer.writerow([i, repr(float(a)), repr(float(b))])
    with open(os.path.join(path, "values.bin"), "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<QQ", *ds.values.shape))
        fh.write(np.ascontiguousarray(ds.values, dtype="<f8").tobytes())


def _read_meta(path) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    for key in ("start_time", "slice_minutes"):
        if key not in meta:
            raise ValueError(f"{path}: missing {key}")
    return meta


def impute_forward(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Carry the previous slice forward into NaN cells; leading NaNs become 0."""
    values = values.copy()
    missing = np.isnan(values)
    count = int(missing.sum())
    if count:
        idx = np.where(~missing, np.arange(values.shape[0])[:, None], -1)
        np.maximum.accumulate(idx, axis=0, out=idx)
        filled = values[np.maximum(idx, 0), np.arange(values.shape[1])]
        filled[idx < 0] = 0.0
        values = filled
    return values, count


def load_dataset(path) -> RawDataset:
    meta = _read_meta(os.path.join(path, "meta.txt"))
    lat, lng = [], []
    with open(os.path.join(path, "points.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "lat", "lng"]:
            raise ValueError(f"points.csv header must be index,lat,lng, got {header}")
        for row_no, row in enumerate(reader):
            if len(row) != 3:
                raise ValueError(f"points.csv row {row_no + 1} has {len(row)} fields, expected 3")
            if int(row[0]) != row_no:
                raise ValueError(f"points.csv row {row_no + 1} has index {row[0]}, expected {row_no}")
            lat.append(float(row[1]))
            lng.append(float(row[2]))
    with open(os.path.join(path, "values.bin"), "rb") as fh:
        blob = fh.read()
    if blob[:5] != DATA_MAGIC or len(blob) < 21:
        raise ValueError("values.bin: malformed header (expected PSTD1 magic and two u64 extents)")
    t, n = struct.unpack_from("<QQ", blob, 5)
    payload = len(blob) - 21
    if payload != 8 * t * n:
        raise ValueError(f"values.bin: ragged payload of {payload} bytes for a {t} x {n} matrix")
    values = np.frombuffer(blob, dtype="<f8", offset=21).reshape(t, n).astype(np.float64)
    if len(lat) != n:
        raise ValueError(f"coordinate count {len(lat)} does not match sensor count {n}")
    values, missing = impute_forward(values)
    if missing:
        warnings.warn(f"{missing} missing values imputed by previous-slice carry-forward", RuntimeWarning, stacklevel=2)
    return RawDataset(
        values=values,
        lat=np.asarray(lat),
        lng=np.asarray(lng),
        start_time=dt.datetime.fromisoformat(meta["start_time"]),
        slice_minutes=int(meta["slice_minutes"]),
    )


# ---------------------------------------------------------------------------
# Splits and windows
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Split:
    name: str
    values: np.ndarray
    offset: int  # index of the split's first slice in the full series
    dataset: RawDataset = field(repr=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    def timestamp(self, t: int) -> dt.datetime:
        return self.dataset.timestamp(self.offset + t)


@dataclass(frozen=True, eq=False)
class ForecastBatch:
    history: np.ndarray  # (H, N)
    future: np.ndarray  # (F, N)
    last_timestamp: dt.datetime
    start: int


def chronological_split(ds: RawDataset, min_length: int = 24) -> tuple[Split, Split, Split]:
    total = ds.n_slices
    if total < min_length:
        raise ValueError(f"series of {total} slices is shorter than one {min_length}-slice sample")
    n_train = int(np.floor(SPLIT_RATIOS[0] * total))
    n_val = int(np.floor(SPLIT_RATIOS[1] * total))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, total)]
    return tuple(Split(name, ds.values[a:b], a, ds) for name, (a, b) in zip(("train", "val", "test"), bounds))


def window_starts(length: int, history: int = 12, horizon: int = 12, stride: int = 1) -> np.ndarray:
    if length < history + horizon:
        return np.zeros(0, dtype=np.intp)
    return np.arange(0, length - history - horizon + 1, stride, dtype=np.intp)


def windows(split: Split, history: int = 12, horizon: int = 12, stride: int = 1) -> Iterator[ForecastBatch]:
    """Lazily yield every (history, future) pair fully inside ``split``."""
    if len(split) < history + horizon:
        raise ValueError(f"split of length {len(split)} is shorter than {history + horizon}")
    for s in window_starts(len(split), history, horizon, stride):
        yield ForecastBatch(
            history=split.values[s : s + history],
            future=split.values[s + history : s + history + horizon],
            last_timestamp=split.timestamp(s + history - 1),
            start=int(s),
        )


def stack_windows(values: np.ndarray, starts: np.ndarray, history: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised gather of ``(B, H, N)`` histories and ``(B, F, N)`` futures."""
    h_idx = starts[:, None] + np.arange(history)
    f_idx = starts[:, None] + history + np.arange(horizon)
    return values[h_idx], values[f_idx]


@dataclass
class ZScore:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, values: np.ndarray) -> "ZScore":
        std = float(np.std(values))
        return cls(float(np.mean(values)), std if std > 0 else 1.0)

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse_transform(self, values):
        return np.asarray(values) * self.std + self.mean


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    rows: dict[str, tuple[float, float, float | None]]

    def __getitem__(self, key) -> tuple[float, float, float | None]:
        return self.rows[str(key)]

    @property
    def average(self) -> tuple[float, float, float | None]:
        return self.rows["average"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["horizon", "mae", "rmse", "mape"])
            for key, (mae, rmse, mape) in self.rows.items():
                writer.writerow([key, repr(mae), repr(rmse), "" if mape is None else repr(mape)])

    def format_table(self) -> str:
        lines = ["horizon   MAE        RMSE       MAPE(%)"]
        for key, (mae, rmse, mape) in self.rows.items():
            mape_s = "n/a" if mape is None else f"{mape:.4f}"
            lines.append(f"{key:<9} {mae:<10.4f} {rmse:<10.4f} {mape_s}")
        return "\n".join(lines)


def _errors(pred: np.ndarray, target: np.ndarray, mask_threshold: float) -> tuple[float, float, float | None]:
    err = pred - target
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(target) > mask_threshold
    if not keep.any():
        warnings.warn("no targets above the MAPE mask threshold; MAPE reported as absent", RuntimeWarning, stacklevel=3)
        return mae, rmse, None
    mape = float(np.mean(np.abs(err[keep]) / np.abs(target[keep])) * 100.0)
    return mae, rmse, mape


def metrics(pred, target, horizons: Sequence[int] = HORIZONS, mask_threshold: float = MAPE_MASK) -> MetricReport:
    """MAE/RMSE/MAPE per horizon step (1-based) and pooled over all steps.

    ``pred`` and ``target`` are ``(S, F, N)`` (or a single ``(F, N)``) stacks.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    rows = {}
    for h in horizons:
        if h <= pred.shape[1]:
            rows[str(h)] = _errors(pred[:, h - 1], target[:, h - 1], mask_threshold)
    rows["average"] = _errors(pred, target, mask_threshold)
    return MetricReport(rows)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTH_LAT = (32.6, 33.2)
SYNTH_LNG = (-117.3, -116.7)


def synth_generate(
    seed: int,
    n_points: int,
    days: int,
    slice_minutes: int = 15,
    k_neighbors: int = 4,
    diffusion: float = 0.5,
    noise: float = 1.0,
    start_time: dt.datetime = dt.datetime(2019, 1, 1),
    noise_persistence: float = 0.0,
) -> RawDataset:
    """Daily sinusoids coupled to the lagged mean of each point's nearest neighbours.

    ``x[t, n] = base + amp[n] * sin(2 pi t / N_d + phase[n])
    + diffusion * mean(x[t-1, nbrs(n)]) + noise * eps[t, n]``.

    ``eps`` is standard Gaussian; with ``noise_persistence`` = rho > 0 it is an
    AR(1) sequence per point (still unit variance), which makes disturbances
    linger long enough for neighbours to carry information across horizons.
    """
    if not 0.0 <= noise_persistence < 1.0:
        raise ValueError("noise_persistence must lie in [0, 1)")
    if n_points < 2 or days < 2:
        raise ValueError("synthetic data needs at least 2 points and 2 days")
    rng = np.random.default_rng(seed)
    unit = rng.uniform(0.0, 1.0, size=(n_points, 2))
    lat = SYNTH_LAT[0] + unit[:, 0] * (SYNTH_LAT[1] - SYNTH_LAT[0])
    lng = SYNTH_LNG[0] + unit[:, 1] * (SYNTH_LNG[1] - SYNTH_LNG[0])
    per_day = (24 * 60) // slice_minutes
    total = days * per_day
    amp = rng.uniform(5.0, 15.0, size=n_points)
    phase = rng.uniform(0.0, 2 * np.pi, size=n_points)
    base = 20.0
    k = min(k_neighbors, n_points - 1)
    _, nbrs = cKDTree(unit).query(unit, k=k + 1)
    nbrs = nbrs[:, 1:]
    t = np.arange(total)[:, None]
    seasonal = base + amp * np.sin(2 * np.pi * t / per_day + phase)
    eps = rng.standard_normal((total, n_points))
    if noise_persistence > 0:
        keep = np.sqrt(1.0 - noise_persistence**2)
        for step in range(1, total):
            eps[step] = noise_persistence * eps[step - 1] + keep * eps[step]
    values = np.empty((total, n_points))
    values[0] = seasonal[0] + noise * eps[0]
    for step in range(1, total):
        spread = values[step - 1][nbrs].mean(axis=1) if k > 0 else 0.0
        values[step] = seasonal[step] + diffusion * spread + noise * eps[step]
    return RawDataset(values, lat, lng, start_time, slice_minutes)
