import csv
import json

import pytest

from dietlab.cli import ExperimentConfig, ConfigError, SWEEP_KEEP, load_model, run_cli
from dietlab.protocol import storage_bits
from dietlab.backbone import Hyper, build_backbone
from dietlab import numerics as nx

SYN = ["--dataset", "synthetic:markov"]


def cfg_file(tmp_path, **kw):
    base = {"dataset": "synthetic:markov", "d": 8, "heads": 2, "blocks": 1, "epochs": 1,
            "keep_ratio": 0.3, "seeds": [0, 1], "output": str(tmp_path / "out")}
    base.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(base))
    return str(p)


def test_config_defaults_and_validation(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.seeds == [0, 1, 2, 3, 4]
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="dense")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(cfg_file(tmp_path, learning_rate=1), {})
    assert ExperimentConfig.from_json(cfg_file(tmp_path), {"mode": "+MG"}).mode == "MG"


def test_exit_codes(tmp_path, capsys):
    assert run_cli(["train", "--bogus"]) == 2
    assert run_cli(["frobnicate"]) == 2
    assert run_cli(["eval", "--dataset", str(tmp_path / "none.txt"), "--output", str(tmp_path)]) == 3
    assert run_cli(["eval", "--config", str(tmp_path / "missing.json")]) == 2
    assert run_cli(["eval", "--config", cfg_file(tmp_path), "--keep-ratio", "0"]) == 2
    bad = tmp_path / "bad.data"
    bad.write_text("1\t2\tx\t4\n")
    assert run_cli(["ingest", "--dataset", str(bad), "--output", str(tmp_path)]) == 3


def test_eval_untrained_model_is_finite(tmp_path, capsys):
    assert run_cli(["eval", "--config", cfg_file(tmp_path), "--seed", "0"]) == 0
    res = json.loads((tmp_path / "out" / "eval.json").read_text())
    assert 0.0 <= res["ndcg"] <= res["hit"] <= 1.0 and res["users"] == 200


def test_ingest_writes_split_cache(tmp_path):
    data = tmp_path / "u.data"
    rows = [f"{u}\t{i}\t5\t{u * 100 + k}" for u in range(1, 6) for k, i in enumerate(range(1, 8))]
    data.write_text("\n".join(rows) + "\n")
    out = tmp_path / "o"
    assert run_cli(["ingest", "--dataset", str(data), "--output", str(out), "--config",
                    cfg_file(tmp_path, k_core=2)]) == 0
    assert (out / "split.bin").is_file()
    stats = json.loads((out / "ingest.json").read_text())
    assert stats["users_test"] == 5 and stats["items"] == 7


def test_train_then_diet_and_eval(tmp_path, capsys):
    cfg = cfg_file(tmp_path)
    assert run_cli(["train", "--config", cfg, "--seed", "1"]) == 0
    out = tmp_path / "out"
    ckpt = out / "model-DIET-k0.3-seed1.ckpt"
    model = load_model(ckpt)
    assert model.mode == "DIET" and model.stack.kind == "DIET"
    log = (out / "trainlog-DIET-seed1.csv").read_text().splitlines()
    assert log[0] == "epoch,step,lr,loss"
    assert run_cli(["diet", "--config", cfg, "--model", str(ckpt), "--items", "1,2,3"]) == 0
    assert (out / "diet.bin").read_bytes()[:6] == b"DIETv1"
    assert run_cli(["diet", "--config", cfg, "--model", str(ckpt), "--items", "1,999"]) == 3
    assert run_cli(["eval", "--config", cfg, "--model", str(ckpt)]) == 0


def test_simulate_dieting_storage(tmp_path, capsys):
    cfg = cfg_file(tmp_path)
    assert run_cli(["simulate", "--config", cfg, "--scenarios", "3", "--mode", "DIETING", "--seed", "0"]) == 0
    summary = json.loads((tmp_path / "out" / "simulate-DIETING-summary.json").read_text())
    bb = build_backbone("SASRec", 30, Hyper(d=8, heads=2, blocks=1), nx.Rng(0))
    assert summary["storage_bits"] == storage_bits("DIETING", bb, 3) == 32 * 64 + 3 * bb.maskable_count
    assert summary["storage_bits"] < storage_bits("DIET", bb, 3)
    rows = list(csv.reader((tmp_path / "out" / "simulate-DIETING.csv").open()))
    assert rows[0][0] == "user" and rows[-1][0] == "all"
    assert run_cli(["simulate", "--config", cfg, "--refresh-policy", "on-shift", "--mode", "base"]) == 0


def test_report_sweep_rows(tmp_path, capsys):
    cfg = cfg_file(tmp_path, epochs=0)
    assert run_cli(["report", "--config", cfg, "--sweep", "keep_ratio"]) == 0
    rows = list(csv.DictReader((tmp_path / "out" / "sweep-keep_ratio.csv").open()))
    assert [(float(r["keep_ratio"]), int(r["seed"])) for r in rows] == [(k, s) for k in SWEEP_KEEP for s in (0, 1)]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["files"] == ["sweep-keep_ratio.csv"]
    assert run_cli(["report", "--config", cfg]) == 2


def test_report_curves_and_zero_rows(tmp_path, capsys):
    cfg = cfg_file(tmp_path, seeds=[0])
    assert run_cli(["report", "--config", cfg, "--curves", "--zero-rows"]) == 0
    curves = list(csv.DictReader((tmp_path / "out" / "curves.csv").open()))
    assert len(curves) == 1 and curves[0]["epoch"] == "0"
    zero = list(csv.DictReader((tmp_path / "out" / "zero-rows.csv").open()))
    assert len(zero) == 6  # one block of SASRec
