import json

import numpy as np
import pytest

from spkcodes.cli import run
from spkcodes.experiments import ExperimentSpec, evaluate, load_spec, run_compare
from spkcodes.model import ConfigError
from spkcodes.synthgen import GenConfig, generate

DATA = {"num_seen_speakers": 3, "num_unseen_speakers": 2, "train_frames": 30, "valid_frames": 8,
        "test_frames": 8, "adapt_frames": [4, 8], "input_dim": 4, "output_dim": 3, "mode": "affine",
        "noise_sigma": 0.05, "seed": 0}
EXP = {"network": {"hidden_width": 6, "depth": 2}, "train": {"epochs": 3, "lr": 0.01},
       "adapt": {"train": {"epochs": 3, "lr": 0.01}}, "strategies": ["bias", "affine"],
       "adapt_sizes": [4, 8], "sizes": [1, 2]}


@pytest.fixture
def data_dir(tmp_path):
    cfg = tmp_path / "data.json"
    cfg.write_text(json.dumps(DATA))
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d"


def write(tmp_path, doc, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_gen_data_manifest_and_determinism(tmp_path, data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["frames"]["s00"] == {"train": 30, "valid": 8, "test": 8}
    assert manifest["frames"]["u01"] == {"adapt": 8, "valid": 8, "test": 8}
    again = tmp_path / "again"
    assert run(["gen-data", "--config", str(tmp_path / "data.json"), "--out", str(again)]) == 0
    second = json.loads((again / "manifest.json").read_text())
    assert second["checksums"] == manifest["checksums"]
    assert (again / "frames.csv").read_bytes() == (data_dir / "frames.csv").read_bytes()


def test_gen_data_refuses_to_overwrite(tmp_path, data_dir):
    assert run(["gen-data", "--config", str(tmp_path / "data.json"), "--out", str(data_dir)]) == 1


def test_gen_data_missing_field_is_named(tmp_path, capsys):
    doc = {k: v for k, v in DATA.items() if k != "noise_sigma"}
    assert run(["gen-data", "--config", write(tmp_path, doc), "--out", str(tmp_path / "x")]) == 1
    assert "noise_sigma" in capsys.readouterr().err


def test_seed_flag_overrides_dataset_seed(tmp_path):
    cfg = write(tmp_path, DATA, "data.json")
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["config"]["seed"] == 3


def test_validation_errors_exit_1(tmp_path, data_dir):
    assert run(["compare", "--config", str(tmp_path / "nope.json")]) == 1
    bad = write(tmp_path, {**EXP, "data": {"path": str(data_dir)}, "strategies": ["warp"]})
    assert run(["compare", "--config", bad, "--out", str(tmp_path / "r")]) == 1
    assert run(["compare", "--config", write(tmp_path, {"network": {}}, "n.json")]) == 1
    assert run(["eval", "--config", write(tmp_path, {"data": {"path": str(data_dir)}}, "e.json")]) == 1


def test_compare_report_shape_and_fairness(tmp_path, data_dir):
    doc = {**EXP, "data": {"path": str(data_dir)}, "strategies": ["bias"]}
    out = tmp_path / "r"
    assert run(["compare", "--config", write(tmp_path, doc), "--out", str(out), "--seed", "0,1"]) == 0
    report = json.loads((out / "compare-001" / "report.json").read_text())
    assert len(report["cells"]) == 4  # 1 strategy x 2 modes x 2 seeds
    assert {(c["mode"], c["seed"]) for c in report["cells"]} == {
        ("nonlinear", 0), ("nonlinear", 1), ("linear", 0), ("linear", 1)}
    assert report["dataset_checksum"] == json.loads((data_dir / "manifest.json").read_text())["checksums"]["dataset"]
    for c in report["cells"]:
        assert c["status"] == "ok"
        assert set(c["params"]) == {"shared", "adapters", "per_speaker"}
        assert set(c["adapted"]) == {"4", "8"}
    assert (out / "compare-001" / "summary.csv").read_text().startswith("strategy,")
    assert "seen_test" in (out / "compare-001" / "table.txt").read_text()


def test_reports_never_overwrite(tmp_path, data_dir):
    doc = {**EXP, "data": {"path": str(data_dir)}, "adapt_sizes": [4]}
    cfg = write(tmp_path, doc)
    out = tmp_path / "r"
    for _ in range(2):
        assert run(["compare", "--config", cfg, "--out", str(out)]) == 0
    a = (out / "compare-001" / "report.json").read_bytes()
    b = (out / "compare-002" / "report.json").read_bytes()
    assert a == b


def test_threads_do_not_change_results(tmp_path, data_dir):
    spec = ExperimentSpec.from_dict({**EXP, "data": {"path": str(data_dir)}, "adapt_sizes": [4]})
    serial, _ = run_compare(spec, [0], threads=1)
    parallel, _ = run_compare(spec, [0], threads=2)
    assert json.dumps(serial, sort_keys=True) == json.dumps(parallel, sort_keys=True)


def test_sweep_rows(tmp_path, data_dir):
    doc = {**EXP, "data": {"path": str(data_dir)}, "sizes": [1]}
    out = tmp_path / "r"
    assert run(["sweep", "--config", write(tmp_path, doc), "--out", str(out), "--seed", "0 1"]) == 0
    report = json.loads((out / "sweep-001" / "report.json").read_text())
    assert [(c["sizes"]["p"], c["seed"]) for c in report["cells"]] == [(1, 0), (1, 1)]
    assert len(report["median_valid_rmse"]) == 1


def test_train_adapt_eval_chain(tmp_path, data_dir):
    out = tmp_path / "r"
    base = {**EXP, "data": {"path": str(data_dir)}}
    assert run(["train", "--config", write(tmp_path, base), "--out", str(out)]) == 0
    ckpt = out / "train-001" / "model-seed0.json"
    assert ckpt.exists() and (out / "train-001" / "history-seed0.csv").exists()
    assert run(["adapt", "--config", write(tmp_path, {**base, "checkpoint": str(ckpt)}, "a.json"),
                "--out", str(out)]) == 0
    adapted = out / "adapt-001" / "model-seed0-adapted-seed0.json"
    before = adapted.read_bytes()
    ev = write(tmp_path, {**base, "checkpoint": str(adapted)}, "e.json")
    assert run(["eval", "--config", ev, "--out", str(out)]) == 0
    assert run(["eval", "--config", ev, "--out", str(out)]) == 0
    assert adapted.read_bytes() == before
    r1 = (out / "eval-001" / "report.json").read_bytes()
    assert r1 == (out / "eval-002" / "report.json").read_bytes()
    report = json.loads(r1)
    assert set(report["cells"][0]["adapted"]) == {"4", "8"}
    assert set(report["cells"][0]["seen"]["per_speaker"]) == {"s00", "s01", "s02"}


def test_oracle_predictor_scores_zero_on_noise_free_data():
    ds = generate(GenConfig(**{**DATA, "adapt_frames": (4, 8), "noise_sigma": 0.0}))
    res = evaluate(ds.predict_oracle, ds, "test", ds.seen)
    assert res["mean"] == 0.0
    assert all(v == 0.0 for v in res["per_speaker"].values())


def test_gradcheck_exit_codes(tmp_path, capsys):
    out = tmp_path / "g"
    assert run(["gradcheck", "--out", str(out)]) == 0
    report = json.loads((out / "gradcheck-001" / "report.json").read_text())
    pairs = [(c["strategy"], c["mode"]) for c in report["cells"]]
    assert len(pairs) == len(set(pairs)) == 14
    assert run(["gradcheck", "--out", str(out), "--inject-bug"]) == 2


def test_bench_runs(tmp_path):
    assert run(["bench", "--out", str(tmp_path / "b")]) == 0
    report = json.loads((tmp_path / "b" / "bench-001" / "report.json").read_text())
    assert len(report["cells"]) == 10


def test_spec_rejects_unknown_fields(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_spec(write(tmp_path, {"data": {"path": "x"}, "colour": 1}))
    with pytest.raises(ConfigError, match="epochz"):
        ExperimentSpec.from_dict({"data": {"path": "x"}, "train": {"epochz": 1}})
    spec = ExperimentSpec.from_dict({"data": {"gen": DATA}})
    assert np.array_equal(spec.adapt_sizes, [10, 40, 160])
