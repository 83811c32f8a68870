import json
import logging
import subprocess
import sys

import pytest

from pits import model as M
from pits.cli import main

SMALL = ["--L", "48", "--H", "12", "--P", "12", "--D", "8", "--batch_size", "16"]


@pytest.fixture(scope="module")
def seasonal_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["toygen", "--toy", "seasonal", "--toy_T", "900", "--channels", "2",
                 "--output_dir", str(out)]) == 0
    return out / "seasonal_toy.csv"


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*args, "--output_dir", str(out)])
    return code, out


def test_toygen_shift_file_count(tmp_path):
    code, out = _run(tmp_path, "shift", "toygen", "--toy", "shift", "--toy_T", "200")
    assert code == 0
    assert len(list(out.glob("shift_*.csv"))) == 1 + 98 + 1  # train + grid series + grid table
    summary = json.loads((out / "run.json").read_text())
    assert summary["files"] == 100 and len(summary["config_hash"]) == 16


def test_toygen_class_counts(tmp_path):
    code, out = _run(tmp_path, "cls", "toygen", "--toy", "class", "--per_class", "3")
    assert code == 0
    assert len((out / "class_toy_labels.csv").read_text().splitlines()) == 1 + 30


def test_pretrain_finetune_eval_chain(tmp_path, seasonal_csv):
    d = ["--data", str(seasonal_csv)]
    code, pre = _run(tmp_path, "pre", "pretrain", *d, *SMALL, "--epochs", "1", "--max_steps", "3")
    assert code == 0
    lines = (pre / "pretrain_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert {"recon", "cl_total", "cl_levels", "total", "config_hash", "seed"} <= rec.keys()
    w = str(pre / "pretrained.pits")
    code, ft = _run(tmp_path, "ft", "finetune", *d, *SMALL, "--weights", w, "--probe_epochs", "1",
                    "--window_stride", "8")
    assert code == 0
    m = json.loads((ft / "metrics.jsonl").read_text())
    assert m["horizon"] == 12 and m["split"] == "test" and m["mse"] > 0
    assert (ft / "metrics.csv").read_text().startswith("dataset,")
    code, ev = _run(tmp_path, "ev", "eval", *d, *SMALL, "--weights", str(ft / "finetuned.pits"),
                    "--window_stride", "8")
    assert code == 0
    assert json.loads((ev / "metrics.jsonl").read_text())["mse"] == m["mse"]


def test_pd_task_logs_no_contrastive(tmp_path, seasonal_csv):
    code, out = _run(tmp_path, "pd", "pretrain", "--data", str(seasonal_csv), *SMALL,
                     "--task", "pd", "--epochs", "1", "--max_steps", "2")
    assert code == 0
    for line in (out / "pretrain_log.jsonl").read_text().splitlines():
        assert json.loads(line)["cl_total"] == 0.0


def test_supervised_uses_half_stride(tmp_path, seasonal_csv):
    code, out = _run(tmp_path, "sup", "supervised", "--data", str(seasonal_csv), *SMALL,
                     "--epochs", "1", "--window_stride", "8")
    assert code == 0
    p = M.load_params(out / "finetuned.pits")
    assert p.stride == 6 and p.N == 7


def test_l512_geometry_logs_42_patches(tmp_path, seasonal_csv, caplog):
    caplog.set_level(logging.INFO, logger="pits")
    code, out = _run(tmp_path, "n42", "pretrain", "--data", str(seasonal_csv), "--L", "512",
                     "--P", "12", "--D", "4", "--epochs", "1", "--max_steps", "1", "--batch_size", "2")
    assert code == 0
    assert json.loads((out / "run.json").read_text())["N"] == 42
    assert any("N=42" in r.getMessage() for r in caplog.records)


def test_missing_data_fails_without_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    code = main(["pretrain", "--data", str(tmp_path / "nope.csv"), "--output_dir", str(out)])
    assert code != 0
    assert "nope.csv" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("L = 48\nbogus_key = 3\n")
    assert main(["pretrain", "--config", str(cfg)]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_finetune_wrong_patch_len(tmp_path, seasonal_csv, capsys):
    d = ["--data", str(seasonal_csv)]
    _, pre = _run(tmp_path, "pre", "pretrain", *d, *SMALL, "--epochs", "1", "--max_steps", "1")
    code = main(["finetune", *d, *SMALL[:4], "--P", "8", "--weights", str(pre / "pretrained.pits"),
                 "--output_dir", str(tmp_path / "x")])
    assert code == 2
    assert "P" in capsys.readouterr().err


def test_gradcheck_passes_and_corrupt_hook_fails(capsys):
    assert main(["gradcheck"]) == 0
    capsys.readouterr()
    assert main(["gradcheck", "--gc_corrupt", "enc.W2"]) == 1
    assert "enc.W2" in capsys.readouterr().err


def test_export_embeddings(tmp_path, seasonal_csv):
    d = ["--data", str(seasonal_csv)]
    _, pre = _run(tmp_path, "pre", "pretrain", *d, *SMALL, "--epochs", "1", "--max_steps", "1")
    code, out = _run(tmp_path, "emb", "export-embeddings", *d, *SMALL, "--window_stride", "50",
                     "--weights", str(pre / "pretrained.pits"), "--layer", "z1")
    assert code == 0
    rows = (out / "embeddings.csv").read_text().splitlines()
    assert rows[0].split(",")[:4] == ["series_id", "channel", "patch_index", "d0"]
    assert len(rows[0].split(",")) == 3 + 8
    assert len(rows) - 1 == json.loads((out / "run.json").read_text())["rows"]


def test_same_config_same_bytes(tmp_path, seasonal_csv):
    args = ["pretrain", "--data", str(seasonal_csv), *SMALL, "--epochs", "1", "--max_steps", "4"]
    main([*args, "--output_dir", str(tmp_path / "a")])
    main([*args, "--output_dir", str(tmp_path / "b")])
    for f in ("pretrain_log.jsonl", "pretrained.pits", "run.json", "config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pits", "toygen", "--toy", "seasonal", "--toy_T", "100",
                        "--output_dir", str(tmp_path / "m")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["files"] == 1


def test_experiment_needs_name(capsys):
    assert main(["experiment"]) == 2


def test_gradcheck_unknown_corrupt_name(capsys):
    assert main(["gradcheck", "--gc_corrupt", "enc.W9"]) == 2
    assert "enc.W9" in capsys.readouterr().err
