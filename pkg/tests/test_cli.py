import json

import numpy as np
import pytest

from vgnn import ingest
from vgnn.cli import main
from vgnn.config import ConfigKeyError, PipelineConfig


def run(*argv):
    return main([str(a) for a in argv])


def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.delta, cfg.epsilon, cfg.top_frac) == (1.0, 0.5, 0.1)
    assert cfg.train["lr"] == 0.003 and cfg.train["batch"] == 16
    assert cfg.model["M"] == 12 and cfg.model["L"] == 4
    assert (cfg.grid_rows, cfg.grid_cols) == (40, 30)


def test_config_unknown_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"delta": 2, "gamma": 1}')
    with pytest.raises(ConfigKeyError):
        PipelineConfig.load(p)
    assert run("graph", "--config", p, "--demand", "x", "--out", tmp_path / "g.json") == 1


def test_usage_errors_exit_2(capsys):
    assert run("train", "--bogus", "1") == 2
    assert run("frobnicate") == 2
    assert run() == 2
    assert run("check", "--help") == 0
    assert "usage" in capsys.readouterr().out


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--seed", 7, "--cells", 36, "--days", 30, "--out", tmp_path / d) == 0
    for f in ("demand.bin", "od.bin", "labels.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert ingest.load_demand(tmp_path / "a" / "demand.bin").values.shape == (720, 36)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--cells", 16, "--days", 14, "--out", d / "syn") == 0
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"model": {"M": 6, "C1": 6, "L": 2, "d_k": 4},
                               "train": {"max_epochs": 2, "patience": 1}}))
    assert run("graph", "--demand", d / "syn/demand.bin", "--od", d / "syn/od.bin",
               "--delta", 1, "--epsilon", 0.5, "--top-frac", 0.1, "--out", d / "graphs.json") == 0
    assert run("train", "--config", cfg, "--demand", d / "syn/demand.bin",
               "--graphs", d / "graphs.json", "--out", d / "ckpt") == 0
    return d, cfg


def test_graph_manifest(pipeline):
    d, _ = pipeline
    man = json.loads((d / "graphs.json.manifest.json").read_text())
    assert man["command"] == "graph" and man["config"]["epsilon"] == 0.5
    assert set(man["report"]) == {"n_cells", "n_significant", "n_virtual", "graph_count"}
    from vgnn.cli import sha256
    assert man["artifacts"]["graphs.json"] == sha256(d / "graphs.json")


def test_train_outputs_and_flag_override(pipeline):
    d, cfg = pipeline
    hist = (d / "ckpt/history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss" and 2 <= len(hist) <= 3
    man = json.loads((d / "ckpt/manifest.json").read_text())
    assert man["config"]["train"]["max_epochs"] == 2
    assert run("train", "--config", cfg, "--epochs", 1, "--demand", d / "syn/demand.bin",
               "--graphs", d / "graphs.json", "--out", d / "ckpt1") == 0
    assert len((d / "ckpt1/history.csv").read_text().splitlines()) == 2
    assert json.loads((d / "ckpt1/manifest.json").read_text())["config"]["train"]["max_epochs"] == 1


def test_train_is_reproducible(pipeline):
    d, cfg = pipeline
    assert run("train", "--config", cfg, "--demand", d / "syn/demand.bin",
               "--graphs", d / "graphs.json", "--out", d / "ckpt2") == 0
    for f in ("model.ckpt", "history.csv"):
        assert (d / "ckpt" / f).read_bytes() == (d / "ckpt2" / f).read_bytes()


def test_eval(pipeline, capsys):
    d, cfg = pipeline
    assert run("eval", "--config", cfg, "--demand", d / "syn/demand.bin", "--graphs", d / "graphs.json",
               "--ckpt", d / "ckpt", "--out", d / "ev") == 0
    rows = (d / "ev/metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "historic_mean", "last_value"]
    assert "rmse" in capsys.readouterr().out


def test_ablate_subset(pipeline):
    d, cfg = pipeline
    out = d / "abl.csv"
    assert run("ablate", "--config", cfg, "--epochs", 1, "--demand", d / "syn/demand.bin",
               "--graphs", d / "graphs.json", "--variants", "D-GNN", "full", "--out", out) == 0
    names = [r.split(",")[0] for r in out.read_text().splitlines()[1:]]
    assert names == ["D-GNN", "full"]
    assert run("ablate", "--config", cfg, "--demand", d / "syn/demand.bin", "--graphs",
               d / "graphs.json", "--variants", "X-GNN", "--out", out) == 1


def test_ingest(tmp_path):
    csv = tmp_path / "uber.csv"
    rows = ['"Date/Time","Lat","Lon","Base"']
    rng = np.random.default_rng(0)
    for i in range(200):
        rows.append(f'"4/1/2014 {i % 24}:{i % 60:02d}:00",{rng.uniform(40.63, 40.82):.4f},'
                    f'{rng.uniform(-74.04, -73.89):.4f},"B02512"')
    csv.write_text("\n".join(rows) + "\n")
    out = tmp_path / "demand.bin"
    assert run("ingest", "--input", tmp_path / "*.csv", "--grid", "40x30",
               "--bounds", "40.628,40.830,-74.05,-73.88", "--bin", 3600, "--out", out,
               "--od-out", tmp_path / "od.bin") == 0
    d = ingest.load_demand(out)
    assert d.values.sum() == 200 and d.values.shape == (24, 1200)
    assert not (tmp_path / "od.bin").exists()          # Uber rows carry no dropoffs
    assert run("ingest", "--input", csv, "--out", out, "--od-out", tmp_path / "od.bin",
               "--require-od") == 1
    assert run("ingest", "--input", tmp_path / "none*.csv", "--out", out) == 1
    assert run("ingest", "--input", csv, "--grid", "40by30", "--out", out) == 2


def test_check_command(capsys):
    assert run("check") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out
