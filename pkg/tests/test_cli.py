import hashlib
import json

import numpy as np
import pytest

from mirank.cli import main
from mirank.model import checkpoint
from mirank.model.network import build_model
from mirank.reports import read_csv

from conftest import tiny_arch

TINY = {
    "n_base": 1,
    "synth": {"n_subjects": 3, "calib_per_class": 4, "online_per_class": 3},
    "train": {"lr": 1e-3, "max_epochs": 2, "min_epochs": 1, "patience": 1, "batch": 8},
}


def digests(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data"), "--seed", "4"]) == 0
    assert main(["train-base", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "base"),
                 "--seed", "4"]) == 0
    return root, cfg


def test_synth_outputs(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert [s["id"] for s in manifest["subjects"]] == ["S01", "S02", "S03"]
    assert manifest["split"] == {"pool": ["S01"], "roster": ["S02", "S03"]}
    assert manifest["subjects"][0]["n_calibration"] == 8 and manifest["subjects"][0]["n_online"] == 6
    assert (root / "data" / "run_config.json").exists()


def test_synth_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "4"]) == 0
    assert digests(tmp_path / "again") == digests(root / "data")


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "usage" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--set", "synth.n_subjects=2", "--out", str(blocker / "sub")]) == 3
    assert "error" in capsys.readouterr().err


def test_train_base_outputs_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    base = root / "base"
    model = checkpoint.load(base / "model.semd")
    assert model.config.n_channels == 27 and model.config.n_samples == 2000
    assert json.loads((base / "train_summary.json").read_text())["stop_epoch"] == 2
    assert json.loads((base / "run_config.json").read_text())["seed"] == 4
    assert main(["train-base", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "b2"),
                 "--seed", "4"]) == 0
    for name in ("model.semd", "train_losses.csv", "train_summary.json", "run_config.json"):
        assert (tmp_path / "b2" / name).read_bytes() == (base / name).read_bytes()


def test_train_base_without_ranking_layers(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train-base", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "e"),
                 "--no-se"]) == 0
    assert checkpoint.load(tmp_path / "e" / "model.semd").config.se_layers == ()


@pytest.mark.parametrize("variant", ["dense", "elec-dense", "elec-map-dense"])
def test_finetune_frozen_check(workspace, tmp_path, variant):
    root, cfg = workspace
    out = tmp_path / variant
    rc = main(["finetune", "--config", str(cfg), "--base", str(root / "base" / "model.semd"),
               "--subject", str(root / "data" / "S02_calibration.eegt"), "--variant", variant, "--out", str(out)])
    assert rc == 0
    check = json.loads((out / "frozen_check.json").read_text())
    assert check["frozen_unchanged"] and check["variant"] == variant
    assert "conv1.w" in check["frozen"]
    assert json.loads((out / "finetune_summary.json").read_text())["variant"] == variant


def test_finetune_continue_all_and_all_subjects(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "ca"
    rc = main(["finetune", "--config", str(cfg), "--base", str(root / "base" / "model.semd"), "--subject", "all",
               "--data", str(root / "data"), "--variant", "continue-all", "--out", str(out)])
    assert rc == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["S02", "S03"]
    assert json.loads((out / "S02" / "frozen_check.json").read_text())["frozen"] == []


def test_finetune_invalid_variant(workspace, capsys):
    root, _ = workspace
    with pytest.raises(SystemExit) as exc:
        main(["finetune", "--base", str(root / "base" / "model.semd"), "--subject", "S02",
              "--variant", "bogus", "--out", "x"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for name in ("continue-all", "dense", "elec-dense", "elec-map-dense"):
        assert name in err


def test_finetune_subject_id_needs_data(workspace):
    root, _ = workspace
    assert main(["finetune", "--base", str(root / "base" / "model.semd"), "--subject", "S02",
                 "--variant", "dense", "--out", str(root / "x")]) == 2


def test_eval_schema_and_summary(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg), "--model", str(root / "base" / "model.semd"),
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert lines[0] == "subject,n_trials,acc,tp,fp,fn,tn"
    rows = read_csv(out / "eval.csv")
    subj = [r for r in rows if r["subject"] not in ("mean", "std")]
    assert [r["subject"] for r in subj] == ["S02", "S03"]
    mean = next(r for r in rows if r["subject"] == "mean")
    assert float(mean["acc"]) == pytest.approx(np.mean([float(r["acc"]) for r in subj]), abs=1e-12)
    for r in subj:
        assert sum(int(r[k]) for k in ("tp", "fp", "fn", "tn")) == int(r["n_trials"]) == 6
    assert (out / "run_config.json").exists()


def test_eval_single_file_and_shape_mismatch(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--config", str(cfg), "--model", str(root / "base" / "model.semd"),
                 "--data", str(root / "data" / "S03_online.eegt"), "--out", str(tmp_path / "one")]) == 0
    tiny = tmp_path / "tiny.semd"
    checkpoint.save(build_model(tiny_arch()), tiny)
    assert main(["eval", "--model", str(tiny), "--data", str(root / "data" / "S03_online.eegt"),
                 "--out", str(tmp_path / "bad")]) == 3


def test_ranks_exports(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "rk"
    assert main(["ranks", "--config", str(cfg), "--model", str(root / "base" / "model.semd"),
                 "--data", str(root / "data" / "S02_online.eegt"), "--out", str(out)]) == 0
    rows = read_csv(out / "electrode_ranks.csv")
    names = [k for k in rows[0] if k not in ("trial", "label")]
    assert len(names) == 27 and names[:3] == ["Fp1", "Fp2", "AF7"]
    values = np.array([[float(r[n]) for n in names] for r in rows])
    assert np.all((values > 0) & (values < 1))
    assert rows[-1]["trial"] == "mean"
    np.testing.assert_allclose(values[-1], values[:-1].mean(0), atol=1e-9)
    frows = read_csv(out / "filter_ranks.csv")
    counts = [sum(r["layer"] == str(k) for r in frows) for k in (1, 2, 3)]
    assert counts == [8, 16, 16]
    assert all(0 < float(r["rank"]) < 1 for r in frows)


def test_same_command_same_reports(workspace, tmp_path):
    root, cfg = workspace
    for name in ("a", "b"):
        assert main(["ranks", "--config", str(cfg), "--model", str(root / "base" / "model.semd"),
                     "--data", str(root / "data"), "--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "a") == digests(tmp_path / "b")
    assert "electrode_rank_heatmap.csv" in digests(tmp_path / "a")


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seed", "0", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert "electrode_se" in out and "featuremap_se" in out
    assert main(["gradcheck", "--seed", "0", "--instances", "1", "--perturb", "dense"]) == 1
    assert "dense" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "m.semd"), "--data", str(tmp_path), "--out",
                 str(tmp_path / "o")]) == 3
