import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from mext import checkpoint, container
from mext.cli import main, parse_thresholds
from mext.errors import CheckpointMismatch, ConfigError
from mext.model import ModelConfig, init

SMALL = {
    "model": {"k": 3, "hidden": 16, "heads": 2, "ffn": 32},
    "regime": {"epochs": [1], "batch_size": 32},
    "task": {"synthetic": {"n_train": 128, "n_dev": 64}},
}


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def trained(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--regime", "romebert", "--task", "synthetic",
                 "--seed", "1", "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(trained):
    assert (trained / "checkpoint.mext").is_file()
    recs = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert recs and recs[0]["regime"] == "romebert"
    man = json.loads((trained / "train.manifest.json").read_text())
    assert man["seed"] == 1
    assert set(man["outputs"]) == {"checkpoint.mext", "metrics.jsonl"}
    meta, _, _ = container.read(trained / "checkpoint.mext")
    assert meta["manifest_id"] == man["id"]


def test_deebert_logs_two_stage_boundaries(tmp_path, small_cfg, caplog):
    with caplog.at_level(logging.INFO):
        rc = main(["train", "--config", str(small_cfg), "--regime", "deebert", "--epochs", "1,1", "--out", str(tmp_path / "d")])
    assert rc == 0
    assert "stage 1 ends" in caplog.text and "stage 2 begins" in caplog.text and "stage 2 ends" in caplog.text


def test_gr_flag_maps_to_sd_only(tmp_path, small_cfg):
    assert main(["train", "--config", str(small_cfg), "--regime", "romebert", "--gr", "off", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "train.manifest.json").read_text())
    assert man["config"]["regime"]["regime"] == "sd_only"


def test_sweep_rows_and_full_depth(trained):
    assert main(["sweep", str(trained / "checkpoint.mext"), "--thresholds", "0,0.1,0.3,0.7", "--out", str(trained)]) == 0
    lines = (trained / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("threshold,metric,expected_time_pct,count_layer_1")
    assert len(lines) == 5
    assert float(lines[1].split(",")[2]) == 100.0


def test_sweep_byte_identical_rerun(trained, tmp_path):
    for d in ("a", "b"):
        assert main(["sweep", str(trained / "checkpoint.mext"), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert (tmp_path / "a" / "sweep.manifest.json").read_bytes() == (tmp_path / "b" / "sweep.manifest.json").read_bytes()


def test_layerwise_and_histogram(trained):
    assert main(["layerwise", str(trained / "checkpoint.mext"), "--out", str(trained)]) == 0
    rows = (trained / "layerwise.csv").read_text().splitlines()
    assert rows[0] == "layer,accuracy" and len(rows) == 4
    assert main(["histogram", str(trained / "checkpoint.mext"), "--threshold", "10", "--out", str(trained)]) == 0
    doc = json.loads((trained / "histogram.json").read_text())
    assert doc["counts"] == [64, 0, 0]
    assert doc["manifest_id"] == json.loads((trained / "histogram.manifest.json").read_text())["id"]


def test_missing_data_exits_3(tmp_path):
    assert main(["train", "--task", "sst-2", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 3


def test_bad_config_exits_2(tmp_path, small_cfg):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(small_cfg), "--gamma", "1.5", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"modle": {}}')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_layout_mismatch_exits_4(trained, tmp_path):
    other = tmp_path / "k4.json"
    other.write_text(json.dumps({"model": {"k": 4, "hidden": 16, "heads": 2, "ffn": 32}}))
    assert main(["sweep", str(trained / "checkpoint.mext"), "--config", str(other), "--out", str(tmp_path)]) == 4


def test_tsv_task_end_to_end(tmp_path, small_cfg):
    d = tmp_path / "sst"
    d.mkdir()
    rows = "sentence\tlabel\na great movie\t1\nterrible plot\t0\ngreat fun !\t1\nboring and bad\t0\n"
    (d / "train.tsv").write_text(rows)
    (d / "dev.tsv").write_text(rows)
    out = tmp_path / "o"
    assert main(["train", "--config", str(small_cfg), "--task", "sst-2", "--data", str(d), "--out", str(out)]) == 0
    assert main(["layerwise", str(out / "checkpoint.mext"), "--out", str(out)]) == 0
    (d / "dev.tsv").write_text("sentence\tlabel\nbroken row\n")
    assert main(["layerwise", str(out / "checkpoint.mext"), "--out", str(out)]) == 3


def test_parse_thresholds():
    assert parse_thresholds("0,0.1, 0.3") == [0.0, 0.1, 0.3]
    for bad in ("", "a,b", "-1"):
        with pytest.raises(ConfigError):
            parse_thresholds(bad)


def test_gradcheck_command_passes():
    proc = subprocess.run([sys.executable, "-m", "mext", "gradcheck", "--coords", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 6


# -- checkpoint -------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, tiny_store):
    checkpoint.save(tmp_path / "c.mext", tiny_store, {"note": "x"})
    store, meta = checkpoint.load(tmp_path / "c.mext", expect=tiny_store.config)
    assert meta["note"] == "x"
    assert store.names() == tiny_store.names()
    for n in store:
        assert store.ownership[n] == tiny_store.ownership[n]
        assert np.array_equal(store[n].data, tiny_store[n].data)
        assert store[n].data.dtype == tiny_store[n].data.dtype


def test_checkpoint_bytes_deterministic(tmp_path, tiny_cfg):
    checkpoint.save(tmp_path / "a.mext", init(tiny_cfg))
    checkpoint.save(tmp_path / "b.mext", init(tiny_cfg))
    assert (tmp_path / "a.mext").read_bytes() == (tmp_path / "b.mext").read_bytes()


def test_checkpoint_mismatch(tmp_path, tiny_store, tiny_cfg):
    checkpoint.save(tmp_path / "c.mext", tiny_store)
    bigger = ModelConfig(**{**tiny_cfg.to_dict(), "hidden": 32, "ffn": 64})
    with pytest.raises(CheckpointMismatch):
        checkpoint.load(tmp_path / "c.mext", expect=bigger)
    f64 = ModelConfig(**{**tiny_cfg.to_dict(), "dtype": "f64"})
    with pytest.raises(CheckpointMismatch):
        checkpoint.load(tmp_path / "c.mext", expect=f64)
    raw = (tmp_path / "c.mext").read_bytes()
    (tmp_path / "t.mext").write_bytes(raw[:-10])
    with pytest.raises(CheckpointMismatch):
        checkpoint.load(tmp_path / "t.mext")


def test_compare_tables(tmp_path, small_cfg):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(small_cfg), "--regimes", "deebert,romebert", "--seeds", "1",
                 "--out", str(out)]) == 0
    rows = (out / "compare_layerwise.csv").read_text().splitlines()
    assert rows[0] == "regime,seed,layer,metric" and len(rows) == 1 + 2 * 3
    summary = json.loads((out / "compare_summary.json").read_text())
    assert set(summary["mean_layerwise"]) == {"deebert", "romebert"}
    assert len(summary["runs"]["deebert"][0]["conflict_rate"]) == 2  # one per epoch, two stages
    assert (out / "deebert_seed1" / "checkpoint.mext").is_file()
    assert main(["compare", "--config", str(small_cfg), "--regimes", "bogus", "--out", str(out)]) == 2
