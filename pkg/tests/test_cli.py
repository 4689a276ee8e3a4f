import json

import numpy as np
import pytest

from factorbench.cli import main
from factorbench.datasets import load_container
from factorbench.factors import get_preset
from factorbench.splits import load_split


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["split", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_split_reports_table_fraction(tmp_path, capsys):
    out = tmp_path / "s.bin"
    assert main(["split", "--preset", "dsprites", "--mode", "extrapolation", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "train fraction: 0.326" in text
    a = load_split(out, get_preset("dsprites"))
    assert a.counts[0] == 240000


def test_split_data_errors(tmp_path, capsys):
    assert main(["split", "--preset", str(tmp_path / "missing.fvb"), "--mode", "extrapolation"]) == 2
    assert main(["split", "--preset", "celebglow", "--mode", "composition"]) == 2
    assert "data error" in capsys.readouterr().err


def test_missing_config_is_a_usage_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert main(["run"]) == 1


def test_generate_train_eval_roundtrip(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FACTORBENCH_CACHE", str(tmp_path / "cache"))
    assert main(["generate", "--preset", "dsprites-tiny", "--resolution", "32"]) == 0
    path = tmp_path / "cache" / "dsprites-tiny-32.fvb"
    ds = load_container(path)
    assert ds.space.total == 3840 and ds.image_shape == (32, 32, 1)

    cfg = tmp_path / "ridge.cfg"
    cfg.write_text("[dataset]\nname = dsprites-tiny\nresolution = 32\n[split]\nmode = random\n"
                   "[predictor]\nkind = ridge\nridge_lambda = 1\n[run]\nmax_train = 1000\nmax_eval = 500\n")
    blob = tmp_path / "ridge.fbp"
    assert main(["train", "--config", str(cfg), "--out", str(blob)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--model", str(blob), "--out", str(tmp_path / "ev")]) == 0
    text = capsys.readouterr().out
    r2 = {line.rsplit("R2", 1)[0].strip(): float(line.rsplit("R2", 1)[1]) for line in text.splitlines()}
    assert min(r2["scale"], r2["x-position"], r2["y-position"]) > 0.7
    assert (tmp_path / "ev" / "report.csv").exists()
    # a model bound to another space is refused
    assert main(["eval", "--preset", "dsprites", "--model", str(blob)]) == 2


def test_eval_latents(tmp_path, capsys):
    space = get_preset("dsprites-tiny")
    idx = np.arange(0, space.total, 3)
    np.save(tmp_path / "z.npy", space.normalized_factors(idx)[:, ::-1])
    np.save(tmp_path / "i.npy", idx)
    assert main(["eval", "--preset", "dsprites-tiny", "--latents", str(tmp_path / "z.npy"),
                 "--indices", str(tmp_path / "i.npy"), "--out", str(tmp_path / "dci.json")]) == 0
    result = json.loads((tmp_path / "dci.json").read_text())
    assert result["dci_disentanglement"] >= 0.98
    assert main(["eval", "--preset", "dsprites-tiny", "--latents", str(tmp_path / "z.npy")]) == 2


def test_run_and_report(tmp_path, capsys):
    cfg = tmp_path / "mean.cfg"
    cfg.write_text("[dataset]\nname = dsprites-tiny\n[predictor]\nkind = mean\n[run]\nseeds = 0, 1\n")
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert "completed" in capsys.readouterr().out
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert "reused" in capsys.readouterr().out
    assert main(["run", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    assert "completed" in capsys.readouterr().out
    assert main(["report", "--out", str(out), "--format", "csv,markdown"]) == 0
    lb = out / "leaderboard"
    assert (lb / "leaderboard.csv").exists() and (lb / "leaderboard.md").exists()
    assert not (lb / "leaderboard.jsonl").exists()
    assert main(["report", "--out", str(out), "--format", "pdf"]) == 1
    record = next((out / "records").glob("*.json"))
    assert main(["report", "--record", str(record), "--out", str(tmp_path / "one"), "--figures"]) == 0
    assert (tmp_path / "one" / "report.md").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["report", "--record", str(bad)]) == 2


def test_seed_override(tmp_path, capsys):
    cfg = tmp_path / "mean.cfg"
    cfg.write_text("[dataset]\nname = dsprites-tiny\n[predictor]\nkind = mean\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path), "--seed", "7"]) == 0
    assert "seed 7:" in capsys.readouterr().out
