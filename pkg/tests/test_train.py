import json

import numpy as np
import pytest

from mirank import train
from mirank.data.dataset import Dataset
from mirank.model import checkpoint
from mirank.model.network import build_model
from mirank.train import (
    FinetuneVariant,
    TrainConfig,
    cross_subject_report,
    early_stop_check,
    evaluate,
    evaluate_predictions,
    finetune,
    stop_epoch_for,
    train_base,
    trainable_partition,
)

from conftest import TINY_MONTAGE, separable_dataset, tiny_arch

QUICK = TrainConfig(lr=1e-2, max_epochs=12, min_epochs=1, patience=50, batch=8, seed=3)
CONV_AND_BN = ("conv1.w", "conv2.w", "conv3_dw.w", "conv3_pw.w", "bn1.gamma", "bn1.beta",
               "bn2.gamma", "bn2.beta", "bn3.gamma", "bn3.beta")


@pytest.fixture(scope="module")
def base_model():
    model, _ = train_base(QUICK, separable_dataset(seed=1), tiny_arch())
    return model


# ---------------------------------------------------------------- early stopping


def test_improving_never_stops():
    cfg = TrainConfig()
    losses = [10 - 0.01 * e for e in range(1000)]
    assert stop_epoch_for(losses, cfg) is None


def test_constant_stops_at_min_epochs():
    assert stop_epoch_for([1.0] * 1000, TrainConfig()) == 100


def test_best_at_150_stops_at_180():
    losses = [10 - 0.01 * e for e in range(150)] + [10 - 0.01 * 149] * 850
    assert stop_epoch_for(losses, TrainConfig()) == 180


def test_small_gains_below_min_delta_do_not_count():
    losses = [1.0] + [1.0 - 5e-4] * 499
    assert stop_epoch_for(losses, TrainConfig()) == 100


def test_early_stop_check_step():
    cfg = TrainConfig(min_epochs=1, patience=2)
    stop, best = early_stop_check([1.0], 0, cfg)
    assert (stop, best) == (False, 1)
    stop, best = early_stop_check([1.0, 0.5], best, cfg)
    assert (stop, best) == (False, 2)
    stop, best = early_stop_check([1.0, 0.5, 0.6, 0.6], best, cfg)
    assert (stop, best) == (True, 2)
    with pytest.raises(ValueError):
        early_stop_check([], 0, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=0).validate()
    with pytest.raises(ValueError, match="min_epochs"):
        TrainConfig(min_epochs=5, max_epochs=4).validate()
    with pytest.raises(ValueError):
        TrainConfig(min_delta=-1).validate()
    TrainConfig(max_epochs=0, min_epochs=0).validate()


def test_constant_loss_training_stops_per_rule(monkeypatch):
    # force a flat loss curve by freezing every parameter
    cfg = TrainConfig(lr=1e-3, max_epochs=20, min_epochs=6, patience=3, batch=16)
    model = build_model(tiny_arch())
    report = train.fit(model, separable_dataset(), cfg, trainable=(), freeze_bn=True)
    assert report.stop_reason == "early_stop"
    assert report.stop_epoch == stop_epoch_for(report.losses, cfg) == 6
    assert len(report.losses) == report.stop_epoch


# ---------------------------------------------------------------- partitions


def test_partitions():
    model = build_model(tiny_arch())
    everything = set(model.params)
    parts = {v: trainable_partition(model, v) for v in FinetuneVariant}
    assert parts[FinetuneVariant.DENSE] == {"dense.W", "dense.b"}
    assert parts[FinetuneVariant.ELEC_DENSE] == {"dense.W", "dense.b", "elec_in.W1", "elec_in.W2",
                                                 "elec_map.W1", "elec_map.W2"}
    emd = parts[FinetuneVariant.ELEC_MAP_DENSE]
    assert len(emd) == 12
    assert emd == parts[FinetuneVariant.ELEC_DENSE] | {f"map{i}.W{j}" for i in (1, 2, 3) for j in (1, 2)}
    assert parts[FinetuneVariant.CONTINUE_ALL] == everything
    for v, part in parts.items():
        frozen = everything - part
        assert not part & frozen and part | frozen == everything
        if v is not FinetuneVariant.CONTINUE_ALL:
            assert not part & set(CONV_AND_BN)


def test_variant_names():
    assert [v.value for v in FinetuneVariant] == ["continue-all", "dense", "elec-dense", "elec-map-dense"]
    with pytest.raises(ValueError, match="continue-all, dense, elec-dense, elec-map-dense"):
        FinetuneVariant.parse("all")


# ---------------------------------------------------------------- training


def test_training_learns_toy_problem():
    cfg = TrainConfig(lr=1e-3, max_epochs=10, min_epochs=10, patience=50, batch=8, seed=0)
    model, report = train_base(cfg, separable_dataset(n_per_class=24), tiny_arch())
    assert np.all(np.diff(report.losses) < 0), report.losses
    assert report.losses[-1] < report.losses[0]
    model, report = train_base(QUICK, separable_dataset(n_per_class=24), tiny_arch())
    assert report.train_accuracy >= 0.95
    assert report.stop_reason == "max_epochs" and len(report.losses) == report.stop_epoch == 12


def test_training_is_deterministic():
    a, _ = train_base(QUICK, separable_dataset(), tiny_arch())
    b, _ = train_base(QUICK, separable_dataset(), tiny_arch())
    assert checkpoint.dumps(a) == checkpoint.dumps(b)


def test_training_rejects_bad_data():
    one_class = Dataset(np.zeros((4, 4, 64)), np.zeros(4), TINY_MONTAGE, 64.0)
    with pytest.raises(ValueError, match="single class"):
        train_base(QUICK, one_class, tiny_arch())
    with pytest.raises(ValueError, match="empty"):
        train_base(QUICK, Dataset(np.zeros((0, 4, 64)), np.zeros(0), TINY_MONTAGE, 64.0), tiny_arch())


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_aborts_with_epoch():
    model = build_model(tiny_arch())
    model.params["dense.b"][:] = [3e38, -3e38]
    model.params["dense.W"][:] = 0
    with pytest.raises(train.TrainingError, match="epoch 1"):
        train.fit(model, separable_dataset(), QUICK, model.params.keys())


@pytest.mark.parametrize("variant", [v for v in FinetuneVariant if v is not FinetuneVariant.CONTINUE_ALL])
def test_finetune_freezes_everything_outside_partition(base_model, variant):
    calib = separable_dataset(seed=9, subject="S09")
    model, report = finetune(base_model, calib, variant, QUICK)
    before, after = checkpoint.tensor_digests(base_model), checkpoint.tensor_digests(model)
    part = trainable_partition(base_model, variant)
    for name in before:
        if name not in part:
            assert before[name] == after[name], name
    assert any(before[n] != after[n] for n in part)
    assert set(report.trainable) == part


def test_continue_all_updates_everything(base_model):
    model, _ = finetune(base_model, separable_dataset(seed=9), "continue-all", QUICK)
    before, after = checkpoint.tensor_digests(base_model), checkpoint.tensor_digests(model)
    assert before["conv1.w"] != after["conv1.w"]
    assert before["bn1.running_mean"] != after["bn1.running_mean"]


def test_zero_epoch_finetune_is_identity(base_model):
    cfg = TrainConfig(max_epochs=0, min_epochs=0)
    model, report = finetune(base_model, separable_dataset(seed=9), "elec-map-dense", cfg)
    assert checkpoint.dumps(model) == checkpoint.dumps(base_model)
    assert report.stop_epoch == 0 and report.losses == []


def test_adam_state_only_for_trainable(base_model, monkeypatch):
    made = []
    real = train.AdamState.zeros_like

    def spy(param, **kw):
        made.append(param.shape)
        return real(param, **kw)

    monkeypatch.setattr(train.AdamState, "zeros_like", staticmethod(spy))
    finetune(base_model, separable_dataset(seed=9), "dense", TrainConfig(max_epochs=1, min_epochs=0))
    assert sorted(made) == sorted([base_model.params["dense.W"].shape, base_model.params["dense.b"].shape])


# ---------------------------------------------------------------- evaluation


def test_evaluate_predictions():
    labels = np.array([0, 1, 0, 1])
    r = evaluate_predictions(labels, labels)
    assert r.accuracy == 1.0 and r.cells == {"tp": 2, "fp": 0, "fn": 0, "tn": 2}
    r = evaluate_predictions(labels, [0, 1, 1, 0])
    assert r.accuracy == 0.5
    assert r.accuracy == np.trace(r.confusion) / r.confusion.sum()
    assert r.confusion.sum(axis=1).tolist() == [2, 2]
    with pytest.raises(ValueError):
        evaluate_predictions([], [])


def test_evaluate_model(base_model):
    ds = separable_dataset(seed=2)
    r = evaluate(base_model, ds)
    assert r.n == len(ds) and 0 <= r.accuracy <= 1
    with pytest.raises(ValueError):
        evaluate(base_model, Dataset(np.zeros((1, 4, 32)), [0], TINY_MONTAGE, 64.0))


def test_cross_subject_report():
    r = cross_subject_report({"S08": 0.6})
    assert (r.mean, r.std) == (0.6, 0.0)
    r = cross_subject_report({"a": 0.5, "b": 0.7})
    assert r.mean == pytest.approx(0.6) and r.std == pytest.approx(0.1)
    r = cross_subject_report({"a": 0.55, "b": 0.7}, base={"a": 0.5, "b": 0.7})
    assert r.improvement == pytest.approx([0.05, 0.0])
    assert "mean" in r.format()


def test_report_files(tmp_path, base_model):
    _, report = finetune(base_model, separable_dataset(seed=9), "dense", TrainConfig(max_epochs=2, min_epochs=0))
    report.write(tmp_path, "ft")
    lines = (tmp_path / "ft_losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 3
    summary = json.loads((tmp_path / "ft_summary.json").read_text())
    assert summary["stop_epoch"] == 2 and summary["variant"] == "dense"
    assert "wall_time_s" in json.loads((tmp_path / "ft_timing.json").read_text())
