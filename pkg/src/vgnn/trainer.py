"""Windowing, scaling, Smooth-L1 training with Adam and early stopping, and
a synthetic demand generator with planted clusters."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tensor
from .ingest import DemandTensor, GridSpec, ODTensor
from .model import DMVSTVGNN, prepare_masks

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# splitting and scaling

def split(n_slots: int, fractions=(0.8, 0.1, 0.1)) -> list[tuple[int, int]]:
    """Contiguous chronological ``[start, end)`` ranges, training first."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    a = int(round(n_slots * fractions[0]))
    b = int(round(n_slots * (fractions[0] + fractions[1])))
    ranges = [(0, a), (a, b), (b, n_slots)]
    for name, (lo, hi) in zip(("train", "val", "test"), ranges):
        if hi <= lo:
            raise ValueError(f"{name} split is empty for T={n_slots}, fractions={fractions}")
    return ranges


@dataclass(frozen=True)
class NormStats:
    """Per-node affine scaling ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray
    method: str = "zscore"

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.shift


def normalize(demand: np.ndarray, train_range: tuple[int, int],
              method: str = "zscore") -> tuple[np.ndarray, NormStats]:
    """Scale each node with statistics from ``train_range`` only.

    ``zscore`` subtracts the mean and divides by the standard deviation;
    ``minmax`` maps the training range of each node onto [0, 1]. Constant
    nodes get unit scale.
    """
    x = np.asarray(demand, dtype=np.float64)
    lo, hi = train_range
    train = x[lo:hi]
    if method == "zscore":
        shift = train.mean(axis=0)
        scale = train.std(axis=0)
    elif method == "minmax":
        shift = train.min(axis=0)
        scale = train.max(axis=0) - shift
    else:
        raise ValueError(f"unknown normalization {method!r}")
    scale = np.where(scale > 0, scale, 1.0)
    stats = NormStats(shift, scale, method)
    return stats.transform(x), stats


@dataclass
class WindowedSplit:
    X: np.ndarray    # (S, M, N)
    y: np.ndarray    # (S, N)
    start: int       # absolute slot of the first window

    def __len__(self) -> int:
        return len(self.y)


def make_windows(values: np.ndarray, slot_range: tuple[int, int], M: int) -> WindowedSplit:
    """All length-``M`` windows inside ``slot_range`` with their next-slot targets."""
    lo, hi = slot_range
    if hi - lo <= M:
        raise ValueError(f"range {slot_range} too short for M={M}")
    v = np.asarray(values, dtype=np.float64)
    count = hi - lo - M
    idx = lo + np.arange(count)[:, None] + np.arange(M)[None, :]
    return WindowedSplit(v[idx], v[lo + M:hi], lo)


@dataclass
class WindowedDataset:
    train: WindowedSplit
    val: WindowedSplit
    test: WindowedSplit
    norm: NormStats
    ranges: list[tuple[int, int]]
    raw: np.ndarray   # unscaled node demand (T, N)

    @property
    def n_nodes(self) -> int:
        return self.raw.shape[1]

    @property
    def train_mean(self) -> np.ndarray:
        lo, hi = self.ranges[0]
        return self.raw[lo:hi].mean(axis=0)


def build_dataset(node_demand: np.ndarray, M: int = 12, fractions=(0.8, 0.1, 0.1),
                  method: str = "minmax") -> WindowedDataset:
    raw = np.asarray(node_demand, dtype=np.float64)
    ranges = split(raw.shape[0], fractions)
    scaled, stats = normalize(raw, ranges[0], method)
    parts = [make_windows(scaled, r, M) for r in ranges]
    return WindowedDataset(*parts, norm=stats, ranges=ranges, raw=raw)


# loss

def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean over elements of 0.5 x**2 for ``|x| < 1`` and ``|x| - 0.5`` otherwise."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise dc.ShapeError(f"smooth_l1: pred {pred.shape} vs target {t.shape}")
    x = t - pred.data
    ax = np.abs(x)
    quad = ax < 1
    value = np.where(quad, 0.5 * x * x, ax - 0.5).mean()
    dx = np.where(quad, x, np.sign(x)) / x.size

    def backward(g):
        return (-g * dx,)

    return dc.custom((pred,), value, backward)


# training

@dataclass
class TrainConfig:
    lr: float = 0.003
    batch: int = 16
    M: int = 12
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.M < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    history: list[EpochRecord] = field(default_factory=list)

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])


def evaluate_loss(model: DMVSTVGNN, part: WindowedSplit, masks, batch: int = 64) -> float:
    total = 0.0
    for s in range(0, len(part), batch):
        pred = model.forward(part.X[s:s + batch], masks, training=False)
        total += float(smooth_l1(pred, part.y[s:s + batch]).data) * len(pred.data)
    return total / len(part)


def predict(model: DMVSTVGNN, part: WindowedSplit, masks, batch: int = 64) -> np.ndarray:
    out = [model.forward(part.X[s:s + batch], masks, training=False).data
           for s in range(0, len(part), batch)]
    return np.concatenate(out, axis=0)


def train(model: DMVSTVGNN, data: WindowedDataset, graphs, cfg: TrainConfig | None = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam on Smooth-L1; keeps the parameters with the lowest validation loss.

    Stops once ``patience`` consecutive epochs fail to improve the
    validation loss, so ``patience=0`` runs a single epoch. The best
    parameters are loaded back into ``model`` before returning.
    """
    cfg = cfg or TrainConfig()
    if min(len(data.train), len(data.val)) == 0:
        raise TrainingError("empty training or validation split")
    rng = np.random.default_rng(cfg.seed)
    masks = prepare_masks(model, graphs)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    best = TrainResult(model.state_dict(), 0, math.inf)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(data.train))
        losses = []
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            model.zero_grad()
            loss = smooth_l1(model.forward(data.train.X[idx], masks, training=True), data.train.y[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged to {float(loss.data)} at epoch {epoch}, step {s // cfg.batch}")
            loss.backward()
            dc.adam_step(opt, params)
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingError(f"parameters diverged to non-finite values at epoch {epoch}, "
                                    f"step {s // cfg.batch}")
            losses.append(float(loss.data) * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        val_loss = evaluate_loss(model, data.val, masks)
        best.history.append(EpochRecord(epoch, train_loss, val_loss))
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(best.history[-1])
        if val_loss < best.best_val:
            best.best_val, best.best_epoch = val_loss, epoch
            best.best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
    model.load_state_dict(best.best_state)
    return best


# synthetic data

@dataclass(frozen=True)
class PatternSpec:
    """Latent structure for :func:`synth_generate`.

    Cells are split into ``clusters`` contiguous blocks. Each cluster has a
    daily sinusoid with its own phase, scaled by a weekly factor; counts are
    the rounded rate plus ``noise`` times Poisson deviation.
    """

    clusters: int = 4
    base: float = 12.0
    amplitude: float = 0.8
    weekend_factor: float = 0.7
    noise: float = 1.0
    trips_per_demand: float = 1.0
    intra_cluster_od: float = 0.8


@dataclass
class SynthData:
    demand: DemandTensor
    od: ODTensor
    labels: np.ndarray
    grid: GridSpec


def _cluster_labels(rows: int, cols: int, k: int) -> np.ndarray:
    """Tile the grid into ``k`` blocks (a near-square layout of block rows and columns)."""
    br = int(math.floor(math.sqrt(k)))
    while k % br:
        br -= 1
    bc = k // br
    r = np.arange(rows)[:, None] * br // rows
    c = np.arange(cols)[None, :] * bc // cols
    return (r * bc + c).ravel()


def synth_generate(n_cells: int = 36, T: int = 60 * 24, seed: int = 7,
                   pattern: PatternSpec | None = None, od_frac: float = 0.8) -> SynthData:
    """Planted-cluster hourly demand on a square grid plus OD flows.

    OD counts are drawn from the pickups of the first ``od_frac`` of the
    slots, matching a training-window-only mobility graph.
    """
    pattern = pattern or PatternSpec()
    side = int(round(math.sqrt(n_cells)))
    if side * side != n_cells:
        raise ValueError(f"n_cells must be a perfect square, got {n_cells}")
    rng = np.random.default_rng(seed)
    grid = GridSpec(40.70, 40.70 + 0.01 * side, -74.00, -74.00 + 0.01 * side, side, side)
    labels = _cluster_labels(side, side, pattern.clusters)
    t = np.arange(T, dtype=np.float64)
    day = np.floor(t / 24)
    weekly = np.where(day % 7 >= 5, pattern.weekend_factor, 1.0)
    phases = 2 * np.pi * np.arange(pattern.clusters) / pattern.clusters
    profile = np.stack([
        pattern.base * weekly * (1 + pattern.amplitude * np.sin(2 * np.pi * t / 24 + ph))
        for ph in phases], axis=1)                                  # (T, clusters)
    rate = profile[:, labels]                                       # (T, cells)
    noisy = rate + pattern.noise * (rng.poisson(rate) - rate)
    values = np.maximum(np.rint(noisy), 0).astype(np.int64)

    # OD: each cell's trips go mostly to cells of its own cluster
    totals = values[: max(1, int(round(T * od_frac)))].sum(axis=0) * pattern.trips_per_demand
    same = labels[:, None] == labels[None, :]
    w = np.where(same, pattern.intra_cluster_od / same.sum(axis=1, keepdims=True),
                 (1 - pattern.intra_cluster_od) / (~same).sum(axis=1, keepdims=True))
    od = rng.poisson(totals[:, None] * w).astype(np.int64)
    return SynthData(DemandTensor(values, 3600, 0.0, grid), ODTensor(od), labels, grid)
