"""Training and evaluation loops with AdamW, milestone halving and best-val checkpoints."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .data import (
    MetricReport,
    RawDataset,
    Split,
    ZScore,
    chronological_split,
    load_dataset,
    metrics,
    stack_windows,
    synth_generate,
    window_starts,
)
from .decoder import l1_loss
from .embedding import slices_per_day, time_indices
from .model import ModelConfig, PatchForecastModel
from .spatial_index import PatchLayout, leaves_per_patch_for, make_layout

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # data: a PSTD1 directory, or synthetic settings when ``dataset`` is empty
    dataset: str = ""
    synth_points: int = 64
    synth_days: int = 30
    synth_slice_minutes: int = 60
    synth_neighbors: int = 4
    synth_diffusion: float = 0.5
    synth_noise: float = 1.0
    synth_noise_persistence: float = 0.0
    synth_seed: int = 0
    history: int = 12
    horizon: int = 12
    # patch geometry
    capacity: int = 2
    leaves_per_patch: int = 0  # 0: derive from n_patches
    n_patches: int = 16
    padding: str = "similarity"
    spatial: bool = True
    # model
    d_input: int = 128
    d_week: int = 32
    d_day: int = 32
    d_spatial: int = 32
    n_heads: int = 4
    n_layers: int = 5
    residual: bool = True
    layernorm: bool = True
    encoder_mode: str = "dual"
    normalize: bool = True
    # optimisation
    lr: float = 0.002
    weight_decay: float = 0.0001
    epochs: int = 50
    batch_size: int = 8
    lr_milestones: tuple[int, ...] = (2, 35, 40)
    grad_clip: float = 0.0
    seed: int = 0
    precision: str = "float64"
    serial: bool = True

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        widths = (self.d_input, self.d_week, self.d_day, self.d_spatial)
        if min(widths) < 0 or sum(widths) <= 0:
            raise ValueError(f"embedding widths must be non-negative with a positive sum, got {widths}")
        if sum(widths) % self.n_heads:
            raise ValueError(f"model width {sum(widths)} is not divisible by {self.n_heads} heads")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError(f"lr milestones must be ascending, got {self.lr_milestones}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Read ``key=value`` lines (``#`` comments allowed) into a :class:`TrainConfig`."""
    base = base or TrainConfig()
    values = base.to_dict()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, getattr(base, key))
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(map(str, value))
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def lr_schedule(epoch: int, base_lr: float, milestones: Sequence[int] = (2, 35, 40)) -> float:
    """Halve ``base_lr`` once for every milestone already reached (1-based epochs)."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return base_lr * 0.5 ** sum(1 for m in milestones if m <= epoch)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float | None
    seconds: float
    lr: float


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def deterministic_rows(self) -> list[tuple]:
        """Rows without wall-clock time, which is the only non-reproducible column."""
        return [(r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.val_mape, r.lr) for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "seconds", "lr"])
            for r in self.rows:
                writer.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.val_rmse),
                     "" if r.val_mape is None else repr(r.val_mape), f"{r.seconds:.3f}", repr(r.lr)]
                )


@dataclass(eq=False)
class Checkpoint:
    store: nx.ParamStore
    meta: dict

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.meta["model"])

    @property
    def layout(self) -> PatchLayout:
        return PatchLayout.from_dict(self.meta["layout"])

    @property
    def scaler(self) -> ZScore | None:
        s = self.meta.get("scaler")
        return None if s is None else ZScore(**s)

    def model(self) -> PatchForecastModel:
        return PatchForecastModel(self.model_config, self.layout, store=self.store)

    def to_bytes(self) -> bytes:
        return nx.checkpoint_bytes(self.store, self.meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        store, meta = nx.checkpoint_from_bytes(blob)
        return cls(store, meta)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def resolve_dataset(cfg: TrainConfig) -> RawDataset:
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    return synth_generate(
        seed=cfg.synth_seed,
        n_points=cfg.synth_points,
        days=cfg.synth_days,
        slice_minutes=cfg.synth_slice_minutes,
        k_neighbors=cfg.synth_neighbors,
        diffusion=cfg.synth_diffusion,
        noise=cfg.synth_noise,
        noise_persistence=cfg.synth_noise_persistence,
    )


def build_layout(cfg: TrainConfig, ds: RawDataset, train: Split) -> PatchLayout:
    """Tree, padding and patches from coordinates and the training split only."""
    lpp = cfg.leaves_per_patch or leaves_per_patch_for(ds.n_points, cfg.capacity, cfg.n_patches)
    _, layout = make_layout(
        ds.coords, cfg.capacity, lpp, train_series=train.values, padding=cfg.padding, spatial=cfg.spatial
    )
    return layout


def _calendar(split: Split, starts: np.ndarray, history: int, slice_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    base = split.timestamp(0)
    dow0, tod0 = time_indices(base, slice_minutes)
    per_day = slices_per_day(slice_minutes)
    absolute = dow0 * per_day + tod0 + starts + history - 1
    return (absolute // per_day) % 7, absolute % per_day


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _predict_split(model: PatchForecastModel, split: Split, cfg_history: int, cfg_horizon: int,
                   slice_minutes: int, scaler: ZScore | None, batch: int = 64):
    starts = window_starts(len(split), cfg_history, cfg_horizon)
    hist, fut = stack_windows(split.values, starts, cfg_history, cfg_horizon)
    dow, tod = _calendar(split, starts, cfg_history, slice_minutes)
    x = scaler.transform(hist) if scaler else hist
    pred = model.predict(x, dow, tod, batch_size=batch)
    if scaler:
        pred = scaler.inverse_transform(pred)
    return pred, fut


def train(cfg: TrainConfig, dataset: RawDataset | None = None) -> tuple[Checkpoint, TrainLog]:
    """Fit the forecaster; returns the best-validation-MAE checkpoint and the epoch log."""
    ds = dataset if dataset is not None else resolve_dataset(cfg)
    with threadpool_limits(1) if cfg.serial else contextlib.nullcontext():
        return _train(cfg, ds)


def _train(cfg: TrainConfig, ds: RawDataset) -> tuple[Checkpoint, TrainLog]:
    train_split, val_split, _ = chronological_split(ds, cfg.history + cfg.horizon)
    if len(val_split) < cfg.history + cfg.horizon:
        raise ValueError(f"validation split of {len(val_split)} slices holds no {cfg.history + cfg.horizon}-slice window")
    layout = build_layout(cfg, ds, train_split)
    scaler = ZScore.fit(train_split.values) if cfg.normalize else None
    mcfg = ModelConfig(
        n_points=ds.n_points,
        history=cfg.history,
        horizon=cfg.horizon,
        d_input=cfg.d_input,
        d_week=cfg.d_week,
        d_day=cfg.d_day,
        d_spatial=cfg.d_spatial,
        slices_per_day=slices_per_day(ds.slice_minutes),
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        residual=cfg.residual,
        layernorm=cfg.layernorm,
        encoder_mode=cfg.encoder_mode,
    )
    model = PatchForecastModel(mcfg, layout, seed=cfg.seed, dtype=cfg.dtype)
    meta = {
        "model": mcfg.to_dict(),
        "layout": layout.to_dict(),
        "scaler": None if scaler is None else dataclasses.asdict(scaler),
        "slice_minutes": ds.slice_minutes,
        "train": cfg.to_dict(),
        "epoch": 0,
    }
    best = Checkpoint(model.store.copy(), dict(meta))
    log = TrainLog()
    if cfg.epochs == 0:
        return best, log

    values = scaler.transform(train_split.values) if scaler else train_split.values
    values = values.astype(cfg.dtype)
    starts = window_starts(len(train_split), cfg.history, cfg.horizon)
    if starts.size == 0:
        raise ValueError("training split is shorter than one window")
    dow_all, tod_all = _calendar(train_split, starts, cfg.history, ds.slice_minutes)
    best_mae = np.inf

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_milestones)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(starts.size)
        losses = []
        for b, a in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[a : a + cfg.batch_size]
            hist, fut = stack_windows(values, starts[idx], cfg.history, cfg.horizon)
            pred = model.forward(hist, dow_all[idx], tod_all[idx])
            loss = l1_loss(pred, fut)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nx.backward(loss, model.store)
            if cfg.grad_clip > 0:
                grads = _clip(grads, cfg.grad_clip)
            nx.adamw_step(model.store, grads, lr=lr, weight_decay=cfg.weight_decay)
            losses.append(float(loss.data))
        pred, fut = _predict_split(model, val_split, cfg.history, cfg.horizon, ds.slice_minutes, scaler)
        val = metrics(pred, fut).average
        seconds = time.perf_counter() - t0
        log.rows.append(EpochRecord(epoch, float(np.mean(losses)), val[0], val[1], val[2], seconds, lr))
        logger.info("epoch %d loss %.5f val MAE %.4f (%.1fs)", epoch, log.rows[-1].train_loss, val[0], seconds)
        if val[0] < best_mae:
            best_mae = val[0]
            best = Checkpoint(model.store.copy(), dict(meta, epoch=epoch))
    return best, log


def evaluate(checkpoint: Checkpoint, dataset: RawDataset, split: str = "test") -> MetricReport:
    """Horizon 3/6/12/average metrics of ``checkpoint`` on one chronological split, in data units."""
    mcfg = checkpoint.model_config
    if dataset.n_points != mcfg.n_points:
        raise ValueError(f"checkpoint expects {mcfg.n_points} points, dataset has {dataset.n_points}")
    if checkpoint.meta.get("slice_minutes") not in (None, dataset.slice_minutes):
        raise ValueError("checkpoint and dataset use different slice lengths")
    parts = dict(zip(("train", "val", "test"), chronological_split(dataset, mcfg.history + mcfg.horizon)))
    if split not in parts:
        raise ValueError(f"split must be one of {tuple(parts)}, got {split!r}")
    with threadpool_limits(1):
        pred, fut = _predict_split(checkpoint.model(), parts[split], mcfg.history, mcfg.horizon,
                                   dataset.slice_minutes, checkpoint.scaler)
    return metrics(pred, fut)
