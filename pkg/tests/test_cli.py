import csv
import hashlib
import json
from pathlib import Path

import pytest

from gridcarbon.cli import main

from conftest import TINY_MODEL

SMALL_SPEC = {"grid_rows": 6, "grid_cols": 6, "n_categories": 3, "image_size": 8, "poi_size": 8, "seed": 5}
TRAIN = {"learning_rate": 5e-3, "batch_size": 8, "max_epochs": 4, "patience": 100, "alpha": 0.05, "gate_epoch": 2}


def digest(path: Path) -> dict:
    return {str(p.relative_to(path)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL_SPEC))
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "ds")]) == 0
    return root


def write_config(root: Path, name: str, out: str, **train_overrides) -> Path:
    cfg = {"dataset": "ds", "output_dir": out, "model": dict(TINY_MODEL), "train": {**TRAIN, **train_overrides}}
    path = root / name
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained_run(workspace):
    cfg = write_config(workspace, "run.json", "run")
    assert main(["train", "--config", str(cfg)]) == 0
    return workspace / "run"


def test_synth_layout(workspace, tmp_path):
    ds = workspace / "ds"
    for name in ("region.json", "cells.csv", "pois.csv", "truth.json", "resolved_config.json", "img_0_0.f64", "poi_5_5.f64"):
        assert (ds / name).exists(), name
    assert len((ds / "cells.csv").read_text().splitlines()) == 1 + 36
    assert main(["synth", "--spec", str(workspace / "spec.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "cells.csv").read_bytes() == (ds / "cells.csv").read_bytes()


def test_synth_default_cell_count(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    assert len((tmp_path / "d" / "cells.csv").read_text().splitlines()) == 1 + 144


def test_synth_rejects_unknown_field(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"grid_rowz": 3}))
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) != 0
    assert "grid_rowz" in capsys.readouterr().err


def test_dry_run(workspace, capsys):
    cfg = write_config(workspace, "dry.json", "dry")
    assert main(["train", "--config", str(cfg), "--dry-run"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["train"]["learning_rate"] == TRAIN["learning_rate"]
    assert resolved["model"]["n_categories"] == 3
    assert not (workspace / "dry").exists()


def test_unknown_config_key(workspace, capsys):
    path = workspace / "bad.json"
    path.write_text(json.dumps({"dataset": "ds", "output_dir": "bad", "train": {"epochs": 3}}))
    assert main(["train", "--config", str(path)]) != 0
    assert "epochs" in capsys.readouterr().err


def test_train_outputs_and_eval_consistency(trained_run, workspace):
    for name in ("resolved_config.json", "history.csv", "metrics.json", "checkpoint/manifest.json", "state/state.json"):
        assert (trained_run / name).exists(), name
    assert main(["eval", "--checkpoint", str(trained_run / "checkpoint"), "--dataset", str(workspace / "ds"),
                 "--out", str(workspace / "ev")]) == 0
    ours = json.loads((workspace / "ev" / "metrics.json").read_text())
    theirs = json.loads((trained_run / "metrics.json").read_text())
    for key in ("mae", "rmse", "r2", "spearman"):
        assert abs(ours[key] - theirs[key]) <= 1e-12
    assert (workspace / "ev" / "resolved_config.json").exists()


def test_train_idempotent_and_input_untouched(trained_run, workspace):
    before = digest(workspace / "ds")
    cfg = write_config(workspace, "run2.json", "run2")
    assert main(["train", "--config", str(cfg)]) == 0
    assert digest(workspace / "ds") == before
    a, b = digest(trained_run), digest(workspace / "run2")
    a.pop("resolved_config.json"), b.pop("resolved_config.json")
    a.pop("state/state.json"), b.pop("state/state.json")     # holds wall-clock time
    assert a == b


def test_resume_continues_epochs(workspace, trained_run):
    cfg = write_config(workspace, "part.json", "part")
    assert main(["train", "--config", str(cfg), "--stop-after", "2"]) == 0
    assert len((workspace / "part" / "history.csv").read_text().splitlines()) == 3
    assert main(["train", "--config", str(cfg), "--checkpoint", str(workspace / "part")]) == 0
    resumed = list(csv.DictReader(open(workspace / "part" / "history.csv")))
    full = list(csv.DictReader(open(trained_run / "history.csv")))
    assert [r["epoch"] for r in resumed] == ["0", "1", "2", "3"]
    assert resumed == full


def test_nan_abort_exit_code(workspace, capsys):
    cfg = write_config(workspace, "nan.json", "nan", learning_rate=1e300, alpha=0.0)
    code = main(["train", "--config", str(cfg)])
    assert code != 0
    assert "non-finite" in capsys.readouterr().err


def test_transfer_writes_both_reports(workspace, trained_run):
    out = workspace / "tr"
    assert main(["transfer", "--checkpoint", str(trained_run / "checkpoint"), "--target", str(workspace / "ds"),
                 "--calibrate", "--out", str(out)]) == 0
    for name in ("transfer_direct.json", "transfer_calibrated.json", "resolved_config.json"):
        assert (out / name).exists()


def test_transfer_incompatible(workspace, trained_run, tmp_path, capsys):
    (tmp_path / "spec.json").write_text(json.dumps({**SMALL_SPEC, "n_categories": 4}))
    main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "ds4")])
    assert main(["transfer", "--checkpoint", str(trained_run / "checkpoint"), "--target", str(tmp_path / "ds4"),
                 "--out", str(tmp_path / "tr")]) != 0
    assert "not aligned" in capsys.readouterr().err


def test_sweep_outputs(workspace):
    cfg = write_config(workspace, "sweep.json", "sweep", max_epochs=2, alpha=0.0)
    assert main(["sweep", "--config", str(cfg), "--factors", "1,2"]) == 0
    names = sorted(p.name for p in (workspace / "sweep").iterdir())
    assert names == ["resolved_config.json", "sweep_factor1.json", "sweep_factor2.json", "sweep_summary.csv"]


def test_export_attention(workspace, trained_run):
    out = workspace / "att" / "weights.csv"
    assert main(["export-attention", "--checkpoint", str(trained_run / "checkpoint"),
                 "--dataset", str(workspace / "ds"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 36
    assert (out.parent / "resolved_config.json").exists()


def test_gridsearch(workspace):
    cfg = write_config(workspace, "gs.json", "gs", alpha=0.0)
    (workspace / "space.json").write_text(json.dumps({"learning_rate": [0.0, 5e-3]}))
    assert main(["gridsearch", "--config", str(cfg), "--space", str(workspace / "space.json"),
                 "--max-epochs", "2"]) == 0
    assert len((workspace / "gs" / "leaderboard.csv").read_text().splitlines()) == 3
    assert json.loads((workspace / "gs" / "best_config.json").read_text()) == {"learning_rate": 5e-3}
    assert (workspace / "gs" / "resolved_config.json").exists()


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("synth", "train", "gridsearch", "eval", "transfer", "sweep", "export-attention"):
        assert cmd in text
