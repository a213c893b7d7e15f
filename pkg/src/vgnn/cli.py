"""``vgnn`` command-line entry point.

Every subcommand reads an optional JSON config (``--config``); flags given
on the command line override it. Each run writes a manifest next to its
output with the resolved config, the seed and SHA-256 hashes of inputs and
outputs (output paths relative to the manifest), so the run can be repeated
and compared byte for byte.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import itertools
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks, graphgen, ingest
from .config import PipelineConfig
from .evaluation import (baseline_historic_mean, baseline_last_value, evaluate_model,
                         run_ablation, standard_variants, write_table)
from .model import DMVSTVGNN, ModelConfig
from .trainer import TrainConfig, build_dataset, split, synth_generate, train

log = logging.getLogger("vgnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    pass


# helpers

def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, cfg: PipelineConfig, inputs: Sequence[Path],
                   outputs: Sequence[Path], **extra) -> None:
    doc = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {str(p): sha256(p) for p in inputs},
        "artifacts": {os.path.relpath(p, path.parent): sha256(p) for p in outputs},
        **extra,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 40x30, got {text!r}") from None
    return rows, cols


def parse_floats(n: int):
    def parse(text: str) -> tuple[float, ...]:
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            vals = ()
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Copy every flag that was given onto the config (flags win)."""
    simple = {"delta": "delta", "epsilon": "epsilon", "top_frac": "top_frac", "bin": "bin_width",
              "bounds": "bounds", "seed": "seed", "normalization": "normalization"}
    for flag, key in simple.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "grid", None) is not None:
        cfg.grid_rows, cfg.grid_cols = args.grid
    train_flags = {"epochs": "max_epochs", "patience": "patience", "lr": "lr", "batch": "batch"}
    for flag, key in train_flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg.train[key] = v
    return cfg


def model_config(cfg: PipelineConfig, graphs: graphgen.VirtualGraphSet) -> ModelConfig:
    spec = dict(cfg.model)
    spec.setdefault("graphs", list(graphs.available()))
    return ModelConfig.from_dict({**spec, "N": graphs.n_nodes})


def train_config(cfg: PipelineConfig) -> TrainConfig:
    return TrainConfig(M=int(cfg.model.get("M", 12)), seed=cfg.seed, **cfg.train)


def load_inputs(cfg: PipelineConfig, demand_path: str, graphs_path: str):
    demand = ingest.load_demand(demand_path)
    lo, hi = split(demand.n_slots, cfg.fractions)[0]
    graphs = graphgen.VirtualGraphSet.load(graphs_path, demand.values[lo:hi].astype(np.float64))
    node_series = graphgen.node_demand(demand, graphs)
    data = build_dataset(node_series, int(cfg.model.get("M", 12)), cfg.fractions,
                         cfg.normalization)
    return demand, graphs, data


# subcommands

def cmd_ingest(args, cfg: PipelineConfig) -> int:
    files = sorted(itertools.chain.from_iterable(glob.glob(p) for p in args.input))
    if not files:
        raise StageError(f"no input files match {args.input}")
    schema = ingest.Schema.load(args.schema) if args.schema else ingest.UBER_2014
    grid = cfg.grid

    def trips(stats=None):
        for f in files:
            yield from ingest.parse_trips(f, schema, stats)

    if args.t0 is not None and args.t1 is not None:
        t0, t1 = ingest.parse_time(args.t0), ingest.parse_time(args.t1)
    else:
        times = [t.pickup_time for t in trips()]
        if not times:
            raise StageError("no parseable trip records")
        t0 = ingest.parse_time(args.t0) if args.t0 else math.floor(min(times) / cfg.bin_width) * cfg.bin_width
        t1 = ingest.parse_time(args.t1) if args.t1 else (math.floor(max(times) / cfg.bin_width) + 1) * cfg.bin_width
    stats = ingest.ParseStats()
    demand = ingest.bin_demand(trips(stats), grid, cfg.bin_width, t0, t1, stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.save_demand(out, demand)
    outputs = [out, Path(str(out) + ".meta.json")]
    print(f"demand: {demand.n_slots} slots x {demand.n_units} cells, {int(demand.values.sum())} trips; "
          f"{stats.malformed} malformed, {stats.out_of_bounds} out of bounds, "
          f"{stats.out_of_window} out of window")

    if args.od_out:
        train_end = t0 + split(demand.n_slots, cfg.fractions)[0][1] * cfg.bin_width
        try:
            od = ingest.build_od(trips(), grid, t0, train_end)
        except ingest.IngestError as exc:
            if args.require_od:
                raise
            log.warning("%s; no OD file written", exc)
        else:
            ingest.save_od(args.od_out, od, grid, t0, train_end)
            outputs += [Path(args.od_out), Path(str(args.od_out) + ".meta.json")]
            print(f"od: {int(od.counts.sum())} trips in training window")
    write_manifest(Path(str(out) + ".manifest.json"), "ingest", cfg, [Path(f) for f in files],
                   outputs, window=[t0, t1])
    return EXIT_OK


def cmd_graph(args, cfg: PipelineConfig) -> int:
    demand = ingest.load_demand(args.demand)
    if demand.grid is None:
        raise StageError(f"{args.demand} carries no grid metadata")
    od = ingest.load_od(args.od) if args.od else None
    train_range = split(demand.n_slots, cfg.fractions)[0]
    graphs, rep = graphgen.generate(demand, train_range, demand.grid, od, cfg.delta, cfg.epsilon,
                                    cfg.top_frac)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    graphs.save(out)
    print(f"cells {rep.n_cells}, significant regions {rep.n_significant}, "
          f"virtual nodes {rep.n_virtual}, graphs {rep.graph_count} ({', '.join(graphs.available())})")
    inputs = [Path(args.demand)] + ([Path(args.od)] if args.od else [])
    write_manifest(Path(str(out) + ".manifest.json"), "graph", cfg, inputs, [out],
                   report=vars(rep))
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    _, graphs, data = load_inputs(cfg, args.demand, args.graphs)
    mcfg = model_config(cfg, graphs)
    model = DMVSTVGNN(mcfg, seed=cfg.seed)
    result = train(model, data, graphs, train_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt")
    (out / "model_config.json").write_text(json.dumps(mcfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result.write_history(out / "history.csv")
    print(f"best epoch {result.best_epoch} of {len(result.history)}, val loss {result.best_val:.6f}")
    outputs = [out / "model.ckpt", out / "model_config.json", out / "history.csv"]
    write_manifest(out / "manifest.json", "train", cfg, [Path(args.demand), Path(args.graphs)],
                   outputs, best_epoch=result.best_epoch, best_val=result.best_val)
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    _, graphs, data = load_inputs(cfg, args.demand, args.graphs)
    ckpt = Path(args.ckpt)
    mcfg = ModelConfig.from_dict(json.loads((ckpt / "model_config.json").read_text()))
    model = DMVSTVGNN(mcfg, seed=cfg.seed)
    model.load(ckpt / "model.ckpt")
    reports = [evaluate_model(model, data, graphs, "full"),
               baseline_historic_mean(data), baseline_last_value(data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", reports)
    reports[0].save_predictions(out / "predictions.csv")
    for r in reports:
        print(f"{r.variant:>14}  rmse {r.rmse:.4f}  mae {r.mae:.4f}  mape_top10 {r.mape_topk:.4f}")
    write_manifest(out / "manifest.json", "eval", cfg,
                   [Path(args.demand), Path(args.graphs), ckpt / "model.ckpt"],
                   [out / "metrics.csv", out / "predictions.csv"])
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    _, graphs, data = load_inputs(cfg, args.demand, args.graphs)
    variants = standard_variants(graphs.available())
    wanted = args.variants or cfg.variants
    if wanted:
        unknown = set(wanted) - {v.name for v in variants}
        if unknown:
            raise StageError(f"unknown variants {sorted(unknown)}")
        variants = [v for v in variants if v.name in wanted]
    base = model_config(cfg, graphs)
    rows = run_ablation(data, graphs, base, train_config(cfg), variants, cfg.seed, args.strict)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, rows)
    for r in rows:
        if r.report is None:
            print(f"{r.variant:>10}  {r.status}")
        else:
            print(f"{r.variant:>10}  rmse {r.report.rmse:.4f}  mae {r.report.mae:.4f}  params {r.n_params}")
    write_manifest(Path(str(out) + ".manifest.json"), "ablate", cfg,
                   [Path(args.demand), Path(args.graphs)], [out])
    return EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    seed = args.seed if args.seed is not None else 7
    cfg.seed = seed
    syn = synth_generate(args.cells, args.days * 24, seed, od_frac=cfg.fractions[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo_hi = split(syn.demand.n_slots, cfg.fractions)[0]
    ingest.save_demand(out / "demand.bin", syn.demand)
    ingest.save_od(out / "od.bin", syn.od, syn.grid, 0.0, float(lo_hi[1] * 3600))
    (out / "labels.json").write_text(json.dumps([int(v) for v in syn.labels]) + "\n")
    outputs = [out / "demand.bin", out / "demand.bin.meta.json", out / "od.bin",
               out / "od.bin.meta.json", out / "labels.json"]
    print(f"synthetic demand: {syn.demand.n_slots} slots x {syn.demand.n_units} cells -> {out}")
    write_manifest(out / "manifest.json", "synth", cfg, [], outputs,
                   cells=args.cells, days=args.days)
    return EXIT_OK


def cmd_check(args, cfg: PipelineConfig) -> int:
    results = checks.run_all(cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail} [{r.seconds:.1f}s]")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vgnn", description="Virtual-graph demand forecasting pipeline.")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text, fn):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON pipeline config; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", "Bin raw trip records into a demand tensor.", cmd_ingest)
    sp.add_argument("--input", required=True, nargs="+", help="CSV file(s) or glob pattern(s)")
    sp.add_argument("--schema", help="JSON column schema (default: Uber 2014 layout)")
    sp.add_argument("--grid", type=parse_grid, help="rows x cols, e.g. 40x30")
    sp.add_argument("--bounds", type=parse_floats(4), help="lat_min,lat_max,lon_min,lon_max")
    sp.add_argument("--bin", type=int, help="slot width in seconds")
    sp.add_argument("--t0", help="window start (ISO time or epoch seconds)")
    sp.add_argument("--t1", help="window end, exclusive")
    sp.add_argument("--out", required=True)
    sp.add_argument("--od-out", help="also write OD counts over the training window")
    sp.add_argument("--require-od", action="store_true",
                    help="fail instead of warning when records lack dropoffs")

    sp = add("graph", "Aggregate cells into virtual nodes and build the graphs.", cmd_graph)
    sp.add_argument("--demand", required=True)
    sp.add_argument("--od")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--top-frac", type=float)
    sp.add_argument("--out", required=True)

    def training_flags(sp):
        sp.add_argument("--demand", required=True)
        sp.add_argument("--graphs", required=True)
        sp.add_argument("--epochs", type=int, help="maximum epochs")
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--normalization", choices=["minmax", "zscore"])

    sp = add("train", "Train the full model and keep the best-validation checkpoint.", cmd_train)
    training_flags(sp)
    sp.add_argument("--out", required=True, help="checkpoint directory")

    sp = add("eval", "Score a checkpoint and the naive baselines on the test split.", cmd_eval)
    sp.add_argument("--demand", required=True)
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--ckpt", required=True, help="directory written by train")
    sp.add_argument("--normalization", choices=["minmax", "zscore"])
    sp.add_argument("--out", required=True)

    sp = add("ablate", "Train and score the ablation variants.", cmd_ablate)
    training_flags(sp)
    sp.add_argument("--variants", nargs="+", help="subset of variant names")
    sp.add_argument("--strict", action="store_true",
                    help="fail when a variant needs the missing mobility graph")
    sp.add_argument("--out", required=True, help="table path")

    sp = add("synth", "Write a planted-cluster synthetic dataset.", cmd_synth)
    sp.add_argument("--cells", type=int, default=36)
    sp.add_argument("--days", type=int, default=60)
    sp.add_argument("--out", required=True, help="output directory")

    add("check", "Run gradient checks and graph-generation oracles.", cmd_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(PipelineConfig.load(args.config), args)
        return args.func(args, cfg)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"vgnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
