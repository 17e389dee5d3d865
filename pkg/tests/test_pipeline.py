import json

import numpy as np
import pytest

from conftest import tiny_config
from sgdm.analysis import WindowPlan, run_window_sweep
from sgdm.data import check_leakage
from sgdm.errors import IntegrityError, InvalidInput, InvalidState
from sgdm.pipeline import (CONTROL_RATES, STAGES, Pipeline, RunConfig, run_ablation, run_stage, stage_hash,
                           variant_name, verify_outputs, with_overrides)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("tiny") / "run")
    Pipeline(cfg).ensure_all()
    return cfg


def test_gen_before_vae_names_missing_stage(tiny):
    run_stage("make-synth", tiny)
    with pytest.raises(InvalidState, match="train-vae"):
        run_stage("train-gen", tiny)


def test_unknown_stage(tiny):
    with pytest.raises(InvalidInput):
        run_stage("train-everything", tiny)


def test_config_validation():
    with pytest.raises(InvalidInput):
        RunConfig(mode="half")
    with pytest.raises(InvalidInput):
        RunConfig(control_rate=1.5)
    with pytest.raises(InvalidInput):
        RunConfig.from_dict({"bogus": 1})


def test_config_hash_tracks_content(tmp_path):
    a = tiny_config(tmp_path / "a")
    assert a.hash() == tiny_config(tmp_path / "b").hash()
    assert a.hash() != with_overrides(a, seed=1).hash()
    assert a.hash() != with_overrides(a, control_rate=0.25).hash()
    assert RunConfig.from_dict(a.to_dict()).hash() == a.hash()


def test_stage_hash_propagates_upstream(tmp_path):
    a = tiny_config(tmp_path)
    b = with_overrides(a, vae={**a.vae, "train": {"epochs": 2}})
    assert stage_hash(a, "make-synth") == stage_hash(b, "make-synth")
    assert stage_hash(a, "train-vae") != stage_hash(b, "train-vae")
    assert stage_hash(a, "train-gen") != stage_hash(b, "train-gen")
    assert stage_hash(a, "train-eeg") == stage_hash(b, "train-eeg")


def test_variant_names(tmp_path):
    a = tiny_config(tmp_path)
    assert variant_name(a, "train-gen") == "train-gen"
    z = with_overrides(a, mode="zero_information")
    assert variant_name(z, "train-gen") == "train-gen@zero_information"
    assert variant_name(z, "train-struct") == "train-struct@zero_information"
    assert variant_name(with_overrides(a, window_ms=[100.0, 300.0]), "train-eeg") == "train-eeg@w100-300"


def test_rerun_is_byte_identical(trained, tmp_path):
    other = with_overrides(trained, out_dir=str(tmp_path / "again"))
    p = Pipeline(other)
    for stage in STAGES:
        p.run_stage(stage)
    a, b = Pipeline(trained), p
    for stage in STAGES:
        assert a.checkpoint_path(stage).read_bytes() == b.checkpoint_path(stage).read_bytes(), stage
    assert (a.out / "split.json").read_bytes() == (b.out / "split.json").read_bytes()


def test_split_has_no_leakage(trained):
    p = Pipeline(trained)
    stimuli, _ = p.dataset()
    check_leakage(p.split(), stimuli)
    ids = [set(getattr(p.split(), k)) for k in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_ensure_skips_current_stages(trained):
    p = Pipeline(trained)
    before = {s: p.checkpoint_path(s).stat().st_mtime_ns for s in STAGES}
    p.ensure_all()
    assert before == {s: p.checkpoint_path(s).stat().st_mtime_ns for s in STAGES}


def test_verify_outputs(trained, tmp_path):
    assert verify_outputs(trained.out_dir)["ok"]
    with pytest.raises(InvalidState):
        verify_outputs(tmp_path)


def test_verify_detects_tampering(trained, tmp_path):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(trained.out_dir, copy)
    ckpt = copy / "checkpoints" / "train-prior.ckpt"
    data = bytearray(ckpt.read_bytes())
    data[-1] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        verify_outputs(copy)


def test_generate_shapes_and_determinism(trained):
    p = Pipeline(trained)
    a = p.generate("test")
    b = Pipeline(trained).generate("test")
    n = len(p.select("test")[1])
    assert a["images"].shape == (n, 3, 64, 64)
    assert np.array_equal(a["images"], b["images"])
    assert set(a["metrics"]) == {"iou", "shift_iou", "ssim", "clip"}


def test_ablation_rejects_unknown_mode(trained):
    with pytest.raises(InvalidInput):
        run_ablation(trained, modes=("full", "everything"))


def test_ablation_report(trained):
    rep = run_ablation(trained)
    assert rep.meta["zero_structure"] == {"full": False, "zero_information": True}
    sweep = rep.meta["control_rate_sweep"]
    assert [r["control_rate"] for r in sweep] == list(CONTROL_RATES)
    assert all({"ssim", "iou", "clip", "is", "fid"} <= set(r) for r in sweep)
    assert {c["metric"] for c in rep.comparisons} == {"iou", "shift_iou", "ssim", "clip"}
    assert all(c["p_fdr"] >= c["p_raw"] for c in rep.comparisons)
    zero = Pipeline(with_overrides(trained, mode="zero_information"))
    rec = json.loads(zero.record_path("train-struct").read_text())
    assert rec["zero_structure"] is True
    assert verify_outputs(trained.out_dir)["ok"]


def test_full_span_window_equals_standard_evaluation(trained):
    curve = run_window_sweep(trained, WindowPlan(width=1000.0, stride=1000.0))
    assert len(curve) == 1
    standard = Pipeline(trained).generate("test")["metrics"]["clip"]
    assert curve[0]["mean"] == pytest.approx(float(np.mean(standard)), abs=1e-9)
