import json
import shutil

import pytest

from conftest import TINY
from sgdm.cli import main


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps({**TINY, "out_dir": str(root / "run")}))
    assert main(["make-synth", "--config", str(cfg)]) == 0
    assert main(["train-all", "--config", str(cfg)]) == 0
    return root, cfg


def test_invalid_state_exit_code(tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "run")}))
    assert main(["make-synth", "--config", str(cfg)]) == 0
    assert main(["train-gen", "--config", str(cfg)]) == 3
    assert "train-vae" in capsys.readouterr().err


def test_invalid_input_exit_codes(tmp_path, run):
    _, cfg = run
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_field": 1}))
    assert main(["make-synth", "--config", str(bad)]) == 2
    assert main(["make-synth", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["ablate", "--config", str(cfg), "--modes", "full,everything"]) == 2
    assert main(["evaluate", "--config", str(cfg), "--gen", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["generate", "--mode", "half"])
    assert e.value.code == 2


def test_generate_and_evaluate(run, tmp_path):
    root, cfg = run
    out = tmp_path / "gen"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--control-rate", "1.0", "--guidance", "2"]) == 0
    index = json.loads((out / "index.json").read_text())
    assert index["control_rate"] == 1.0 and index["guidance"] == 2.0
    assert len(index["items"]) == len(list(out.glob("*.png"))) > 0
    assert "stage_hashes" in index
    report = tmp_path / "eval.json"
    csv = tmp_path / "eval.csv"
    assert main(["evaluate", "--config", str(cfg), "--gen", str(out), "--report", str(report),
                 "--csv", str(csv)]) == 0
    rep = json.loads(report.read_text())
    assert len(rep["per_item"]) == len(index["items"])
    assert {"is", "fid"} <= set(rep["meta"]["set_metrics"])
    assert csv.read_text().count("\n") == len(index["items"]) + 1


def test_verify_and_integrity_exit_code(run, tmp_path):
    root, cfg = run
    assert main(["verify", "--config", str(cfg)]) == 0
    copy = tmp_path / "copy"
    shutil.copytree(root / "run", copy)
    ckpt = copy / "checkpoints" / "train-eeg.ckpt"
    data = bytearray(ckpt.read_bytes())
    data[-1] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    assert main(["verify", "--config", str(cfg), "--run", str(copy)]) == 4
