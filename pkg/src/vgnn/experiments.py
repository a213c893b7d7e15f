"""Desk-scale experiments on the planted-cluster synthetic set."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import graphgen
from .evaluation import (ForecastReport, VariantSpec, baseline_historic_mean,
                         baseline_last_value, evaluate_model, run_ablation)
from .model import DMVSTVGNN, ModelConfig
from .trainer import SynthData, TrainConfig, WindowedDataset, build_dataset, split, synth_generate, train

# Epoch budget for desk-scale runs; training loss flattens well before this.
DESK_TRAIN = TrainConfig(max_epochs=15, patience=4)


@dataclass
class SynthSetup:
    syn: SynthData
    graphs: graphgen.VirtualGraphSet
    report: graphgen.GraphReport
    data: WindowedDataset


def synth_setup(seed: int = 7, cells: int = 36, days: int = 60, M: int = 12,
                delta: float = 1.0, epsilon: float = 0.5, frac: float = 0.1) -> SynthSetup:
    syn = synth_generate(cells, days * 24, seed)
    train_range = split(syn.demand.n_slots)[0]
    graphs, rep = graphgen.generate(syn.demand, train_range, syn.grid, syn.od, delta, epsilon, frac)
    data = build_dataset(graphgen.node_demand(syn.demand, graphs), M)
    return SynthSetup(syn, graphs, rep, data)


def cluster_purity(graphs: graphgen.VirtualGraphSet, labels: np.ndarray) -> float:
    """Fraction of virtual nodes whose member cells all share one planted label."""
    pure = [len({int(labels[c]) for c in n.member_cells}) == 1 for n in graphs.nodes]
    return float(np.mean(pure))


@dataclass
class EndToEnd:
    model: ForecastReport
    historic_mean: ForecastReport
    last_value: ForecastReport
    history: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def gain_vs_mean(self) -> float:
        return 1.0 - self.model.rmse / self.historic_mean.rmse

    @property
    def gain_vs_last(self) -> float:
        return 1.0 - self.model.rmse / self.last_value.rmse


def end_to_end(setup: SynthSetup, model_seed: int = 0,
               train_cfg: TrainConfig = DESK_TRAIN, **model_kw) -> EndToEnd:
    t = time.perf_counter()
    cfg = ModelConfig(N=setup.graphs.n_nodes, graphs=setup.graphs.available(), **model_kw)
    model = DMVSTVGNN(cfg, seed=model_seed)
    result = train(model, setup.data, setup.graphs, train_cfg)
    rep = evaluate_model(model, setup.data, setup.graphs, "full")
    return EndToEnd(rep, baseline_historic_mean(setup.data), baseline_last_value(setup.data),
                    result.history, time.perf_counter() - t)


@dataclass
class AblationDirection:
    rmse: dict[str, list[float]]     # variant -> per-seed test RMSE

    def mean(self, name: str) -> float:
        return float(np.mean(self.rmse[name]))

    def noise(self, a: str, b: str) -> float:
        """Sum of the two variants' sample standard deviations across seeds."""
        return float(np.std(self.rmse[a], ddof=1) + np.std(self.rmse[b], ddof=1))

    def full_within_noise(self, name: str) -> bool:
        return self.mean("full") <= self.mean(name) + self.noise("full", name)


def ablation_direction(setup: SynthSetup, seeds=(0, 1, 2),
                       train_cfg: TrainConfig = DESK_TRAIN) -> AblationDirection:
    """Full model against each single-graph variant, one training per seed."""
    kinds = setup.graphs.available()
    variants = [VariantSpec(f"{k[0].upper()}-GNN", (k,)) for k in kinds]
    variants.append(VariantSpec("full", kinds))
    base = ModelConfig(N=setup.graphs.n_nodes, graphs=kinds)
    out: dict[str, list[float]] = {v.name: [] for v in variants}
    for s in seeds:
        cfg = TrainConfig(**{**train_cfg.__dict__, "seed": s})
        for row in run_ablation(setup.data, setup.graphs, base, cfg, variants, model_seed=s):
            out[row.variant].append(row.report.rmse)
    return AblationDirection(out)
