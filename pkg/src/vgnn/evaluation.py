"""Forecast metrics, naive baselines and the ablation harness."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphgen import VirtualGraphSet
from .model import DMVSTVGNN, ModelConfig, prepare_masks
from .trainer import TrainConfig, WindowedDataset, predict, train

log = logging.getLogger(__name__)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} differs from target {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def hot_nodes(train_mean: np.ndarray, frac: float = 0.1) -> np.ndarray:
    """Indices of the top ``frac`` of nodes by training mean (at least one; ties to lower index)."""
    n = len(train_mean)
    k = max(1, int(np.floor(frac * n + 1e-9)))
    order = np.argsort(-np.asarray(train_mean, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def mape_topk(pred, target, train_mean, frac: float = 0.1, floor: float = 1.0) -> float:
    """Mean of ``|y - yhat| / max(y, floor)`` over hot nodes and all slots.

    ``pred`` and ``target`` are ``(slots, nodes)`` in raw demand units.
    """
    p, t = _pair(pred, target)
    cols = hot_nodes(train_mean, frac)
    p, t = p[:, cols], t[:, cols]
    return float(np.mean(np.abs(t - p) / np.maximum(t, floor)))


@dataclass
class ForecastReport:
    variant: str
    pred: np.ndarray
    target: np.ndarray
    train_mean: np.ndarray
    rmse: float = 0.0
    mae: float = 0.0
    mape_topk: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, variant: str, pred, target, train_mean, frac: float = 0.1,
                         **extra) -> "ForecastReport":
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        return cls(variant, pred, target, np.asarray(train_mean, dtype=np.float64),
                   rmse(pred, target), mae(pred, target),
                   mape_topk(pred, target, train_mean, frac), dict(extra))

    def recompute(self, frac: float = 0.1) -> tuple[float, float, float]:
        return (rmse(self.pred, self.target), mae(self.pred, self.target),
                mape_topk(self.pred, self.target, self.train_mean, frac))

    def save_predictions(self, path: str | Path) -> None:
        """Long-format dump: one ``slot,node,prediction,target`` row per point."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "node", "prediction", "target"])
            for s in range(self.pred.shape[0]):
                for n in range(self.pred.shape[1]):
                    w.writerow([s, n, repr(float(self.pred[s, n])), repr(float(self.target[s, n]))])


def load_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    S = int(rows[:, 0].max()) + 1
    N = int(rows[:, 1].max()) + 1
    pred = np.zeros((S, N))
    tgt = np.zeros((S, N))
    pred[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
    tgt[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 3]
    return pred, tgt


def _test_target(data: WindowedDataset) -> np.ndarray:
    return data.norm.inverse_transform(data.test.y)


def baseline_historic_mean(data: WindowedDataset) -> ForecastReport:
    target = _test_target(data)
    pred = np.broadcast_to(data.train_mean, target.shape)
    return ForecastReport.from_predictions("historic_mean", pred, target, data.train_mean)


def baseline_last_value(data: WindowedDataset) -> ForecastReport:
    target = _test_target(data)
    pred = data.norm.inverse_transform(data.test.X[:, -1, :])
    return ForecastReport.from_predictions("last_value", pred, target, data.train_mean)


def evaluate_model(model: DMVSTVGNN, data: WindowedDataset, graphs, variant: str = "full",
                   **extra) -> ForecastReport:
    pred = data.norm.inverse_transform(predict(model, data.test, prepare_masks(model, graphs)))
    return ForecastReport.from_predictions(variant, pred, _test_target(data), data.train_mean,
                                           **extra)


# ablation

@dataclass(frozen=True)
class VariantSpec:
    name: str
    graphs: tuple[str, ...]
    short_term: bool = True
    long_term: bool = True

    def __post_init__(self):
        if not self.graphs:
            raise ValueError(f"{self.name}: at least one graph must be enabled")
        if not (self.short_term or self.long_term):
            raise ValueError(f"{self.name}: at least one temporal view must be enabled")

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return base.variant(graphs=self.graphs, short_term=self.short_term,
                            long_term=self.long_term)


_D, _C, _M = "distance", "correlation", "mobility"


def standard_variants(graph_kinds: Sequence[str] = (_D, _C, _M)) -> list[VariantSpec]:
    """The eight ablations plus the full model, built around ``graph_kinds``."""
    full = tuple(k for k in (_D, _C, _M) if k in graph_kinds)
    return [
        VariantSpec("D-GNN", (_D,)),
        VariantSpec("C-GNN", (_C,)),
        VariantSpec("M-GNN", (_M,)),
        VariantSpec("D+C-GNN", (_D, _C)),
        VariantSpec("C+M-GNN", (_C, _M)),
        VariantSpec("D+M-GNN", (_D, _M)),
        VariantSpec("SD-GNN", full, long_term=False),
        VariantSpec("LD-GNN", full, short_term=False),
        VariantSpec("full", full),
    ]


class AblationError(ValueError):
    pass


@dataclass
class AblationRow:
    variant: str
    report: ForecastReport | None
    n_params: int = 0
    status: str = "ok"


def run_ablation(data: WindowedDataset, graphs: VirtualGraphSet, base: ModelConfig,
                 train_cfg: TrainConfig, variants: Sequence[VariantSpec] | None = None,
                 model_seed: int = 0, strict: bool = False) -> list[AblationRow]:
    """Train and test every variant; variants needing a missing graph are
    reported as unavailable (or raise with ``strict``)."""
    avail = set(graphs.available())
    variants = list(variants) if variants is not None else standard_variants(graphs.available())
    missing = [v.name for v in variants if not set(v.graphs) <= avail]
    if missing and strict:
        raise AblationError(f"mobility graph unavailable for variants: {', '.join(missing)}")
    rows = []
    for v in variants:
        if v.name in missing:
            rows.append(AblationRow(v.name, None, 0, "unavailable"))
            continue
        cfg = v.model_config(base)
        model = DMVSTVGNN(cfg, seed=model_seed)
        result = train(model, data, graphs, train_cfg)
        rep = evaluate_model(model, data, graphs, v.name, best_val=result.best_val,
                             epochs=len(result.history))
        log.info("%s rmse %.4f mae %.4f", v.name, rep.rmse, rep.mae)
        rows.append(AblationRow(v.name, rep, model.n_parameters()))
    return rows


def write_table(path: str | Path, reports: Sequence[ForecastReport | AblationRow],
                delimiter: str = ",") -> None:
    """Delimited ``variant, RMSE, MAE, MAPE_top10`` table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["variant", "RMSE", "MAE", "MAPE_top10", "status"])
        for r in reports:
            if isinstance(r, AblationRow):
                if r.report is None:
                    w.writerow([r.variant, "", "", "", r.status])
                    continue
                name, rep, status = r.variant, r.report, r.status
            else:
                name, rep, status = r.variant, r, "ok"
            w.writerow([name, f"{rep.rmse:.6f}", f"{rep.mae:.6f}", f"{rep.mape_topk:.6f}", status])
