import csv
import json
from pathlib import Path

import numpy as np
import pytest

from plmlab import cli
from plmlab.trainer import STAGES


def write_cfg(tmp_path, **over):
    cfg = {
        "seed": 3,
        "output_dir": "out",
        "dataset": {"source": "synthetic", "c": 3, "per_class_n": 40, "test_per_class_n": 10},
        "noise": {"kind": "symmetric", "rate": 0.3},
        "train": {"epochs_labeler": 2, "epochs_joint": 2, "epochs_classifier": 2, "batch_size": 32, "hidden": [16]},
        "eval": {"per_class_cap": 10},
    }
    for k, v in over.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and isinstance(cfg.get(k), dict) else v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    assert cli.main(["prepare", "--config", str(cfg), "--quiet"]) == 0
    for v in ("plm_f", "forward_baseline", "plm_r"):
        assert cli.main(["train", "--config", str(cfg), "--variant", v, "--quiet"]) == 0
    return tmp, cfg


def test_unknown_key_is_config_error_naming_the_field(tmp_path, caplog):
    cfg = write_cfg(tmp_path, train={"epochs_joint": 2, "learning_rate": 0.1})
    assert cli.main(["prepare", "--config", str(cfg)]) == 2
    assert "train.learning_rate" in caplog.text


def test_missing_seed_and_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"output_dir": "x"}))
    assert cli.main(["prepare", "--config", str(p), "--quiet"]) == 2
    p.write_text("{not json")
    assert cli.main(["prepare", "--config", str(p), "--quiet"]) == 2
    assert cli.main(["prepare", "--config", str(tmp_path / "missing.json"), "--quiet"]) == 2


def test_missing_idx_files_exit_2(tmp_path):
    cfg = write_cfg(tmp_path, dataset={"source": "idx", "train_images": "nope-images", "train_labels": "nope-labels"})
    assert cli.main(["prepare", "--config", str(cfg), "--quiet"]) == 2


def test_train_without_prepare_exit_2(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--quiet"]) == 2


def test_prepare_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["prepare", "--config", str(cfg), "--quiet"]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "out" / "dataset").iterdir()}
    assert cli.main(["prepare", "--config", str(cfg), "--quiet"]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "out" / "dataset").iterdir()}
    assert first == second


def test_run_layout_and_stage_lists(trained):
    tmp, _ = trained
    for v in ("plm_f", "forward_baseline", "plm_r"):
        d = tmp / "out" / "runs" / v
        m = json.loads((d / "manifest.json").read_text())
        assert m["stages"] == list(STAGES[v])
        assert m["seed"] == 3 and m["config"]["seed"] == 3
        for rel in m["files"].values():
            assert (d / rel).exists()
    assert len(STAGES["plm_f"]) == 6 and len(STAGES["forward_baseline"]) == 3
    assert (tmp / "out" / "runs" / "plm_r" / "T_revised.csv").exists()


def test_metrics_csv_columns_and_determinism(trained, tmp_path):
    tmp, cfg = trained
    ref = (tmp / "out" / "runs" / "plm_f" / "metrics.csv").read_text()
    rows = list(csv.DictReader(ref.splitlines()))
    assert list(rows[0]) == list(cli.METRICS_COLUMNS)
    assert {r["stage"] for r in rows} == {"labeler", "joint_posterior", "classifier"}
    assert cli.main(["train", "--config", str(cfg), "--variant", "plm_f", "--out", str(tmp_path / "again"),
                     "--quiet"]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_text() == ref


def test_eval_writes_single_row_per_cell(trained):
    tmp, cfg = trained
    runs = [str(tmp / "out" / "runs" / v) for v in ("plm_f", "forward_baseline")]
    assert cli.main(["eval", "--config", str(cfg), "--quiet", *runs]) == 0
    with open(tmp / "out" / "report" / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(r["variant"] for r in rows) == ["forward_baseline", "plm_f"]
    plm = next(r for r in rows if r["variant"] == "plm_f")
    assert float(plm["posterior_error_std"]) == 0.0 and plm["n_seeds"] == "1"
    assert float(plm["time_ratio"]) > 0
    rec = json.loads((tmp / "out" / "runs" / "plm_f" / "eval.json").read_text())
    assert rec["seed"] == 3 and 0 <= rec["posterior_error"] <= np.sqrt(2)
    assert 0 <= rec["test_accuracy"] <= 1 and rec["T_error"] is not None


def test_report_rebuilds_from_eval_records(trained, tmp_path):
    tmp, cfg = trained
    runs = [str(tmp / "out" / "runs" / v) for v in ("plm_f", "forward_baseline")]
    assert cli.main(["eval", "--config", str(cfg), "--quiet", *runs]) == 0
    assert cli.main(["report", "--out", str(tmp_path / "r"), "--quiet", *runs]) == 0
    assert (tmp_path / "r" / "summary.csv").read_bytes() == (tmp / "out" / "report" / "summary.csv").read_bytes()
    assert cli.main(["report", "--quiet"]) == 4


def test_incomplete_run_exit_4(trained, tmp_path):
    tmp, cfg = trained
    src = tmp / "out" / "runs" / "plm_f"
    broken = tmp_path / "broken"
    broken.mkdir()
    m = json.loads((src / "manifest.json").read_text())
    m["stages"] = m["stages"][:3]
    (broken / "manifest.json").write_text(json.dumps(m))
    assert cli.main(["eval", "--config", str(cfg), "--quiet", str(broken)]) == 4
    assert cli.main(["eval", "--config", str(cfg), "--quiet", str(tmp_path / "absent")]) == 4


def test_training_failure_exit_3(tmp_path, monkeypatch, caplog):
    from plmlab.errors import TrainingError

    cfg = write_cfg(tmp_path)
    assert cli.main(["prepare", "--config", str(cfg), "--quiet"]) == 0

    def boom(tcfg, ds):
        raise TrainingError("non-finite loss at epoch 1", "joint_posterior", 1)

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert cli.main(["train", "--config", str(cfg), "--quiet"]) == 3
    assert "joint_posterior" in caplog.text


def test_relative_paths_resolve_against_config(tmp_path):
    sub = tmp_path / "conf"
    sub.mkdir()
    cfg = write_cfg(sub, output_dir="../elsewhere")
    loaded = cli.load_config(cfg)
    assert Path(loaded.output_dir) == (tmp_path / "elsewhere").resolve()


def test_sample_configs_validate():
    root = Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.glob("*.json"))
    assert paths
    for p in paths:
        cli.load_config(p)
