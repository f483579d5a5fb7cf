"""Base training, fine-tuning variants, early stopping and evaluation."""
from __future__ import annotations

import csv
import enum
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mirank.core import ops
from mirank.core.ops import NonFiniteError
from mirank.core.optim import AdamState, adam_update
from mirank.data.dataset import Dataset
from mirank.model.network import (
    ArchConfig, ModelState, apply_max_norm, backward, build_model, forward, logits, predict_from_logits,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 32
    max_epochs: int = 1000
    patience: int = 30
    min_delta: float = 1e-3
    min_epochs: int = 100
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        problems = []
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.max_epochs < 0 or self.min_epochs < 0:
            problems.append("epoch limits must be >= 0")
        if self.min_epochs > self.max_epochs:
            problems.append("min_epochs must not exceed max_epochs")
        if self.min_delta < 0:
            problems.append("min_delta must be >= 0")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class FinetuneVariant(str, enum.Enum):
    CONTINUE_ALL = "continue-all"
    DENSE = "dense"
    ELEC_DENSE = "elec-dense"
    ELEC_MAP_DENSE = "elec-map-dense"

    @classmethod
    def parse(cls, name: str) -> "FinetuneVariant":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown fine-tune variant {name!r}; valid: {valid}") from None


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainReport:
    losses: list[float]
    stop_epoch: int
    stop_reason: str                  # "early_stop" | "max_epochs"
    train_accuracy: float
    wall_time: float = 0.0
    trainable: tuple[str, ...] = ()
    variant: str = "base"

    def summary(self) -> dict:
        """Deterministic summary (wall time is reported separately)."""
        return {
            "variant": self.variant,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "final_loss": self.losses[-1] if self.losses else None,
            "train_accuracy": self.train_accuracy,
            "trainable": list(self.trainable),
        }

    def write(self, out_dir, stem: str = "train") -> None:
        out_dir = Path(out_dir)
        with open(out_dir / f"{stem}_losses.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, loss in enumerate(self.losses, 1):
                w.writerow([i, repr(float(loss))])
        (out_dir / f"{stem}_summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        (out_dir / f"{stem}_timing.json").write_text(json.dumps({"wall_time_s": round(self.wall_time, 3)}) + "\n")


# --------------------------------------------------------------------------
# early stopping


def early_stop_check(history: list[float], best_epoch: int, cfg: TrainConfig) -> tuple[bool, int]:
    """Decide after the last entry of ``history`` (epochs are 1-based).

    ``best_epoch`` is 0 before any epoch has been seen. The best moves to the
    current epoch when its loss beats the best loss by more than
    ``min_delta``. Returns ``(stop, best_epoch)``; stopping needs both
    ``epoch >= min_epochs`` and ``epoch - best_epoch >= patience``.
    """
    if not history:
        raise ValueError("early_stop_check needs at least one loss")
    epoch = len(history)
    if best_epoch == 0 or history[-1] < history[best_epoch - 1] - cfg.min_delta:
        best_epoch = epoch
    stop = epoch >= cfg.min_epochs and epoch - best_epoch >= cfg.patience
    return stop, best_epoch


def stop_epoch_for(losses, cfg: TrainConfig) -> int | None:
    """Epoch at which training on ``losses`` would stop early, or None."""
    best = 0
    for e in range(1, min(len(losses), cfg.max_epochs) + 1):
        stop, best = early_stop_check(list(losses[:e]), best, cfg)
        if stop:
            return e
    return None


# --------------------------------------------------------------------------
# parameter partitions

_ELEC = ("elec_in", "elec_map")
_MAPS = ("map1", "map2", "map3")


def trainable_partition(model: ModelState, variant: FinetuneVariant | str) -> frozenset[str]:
    variant = FinetuneVariant.parse(variant) if isinstance(variant, str) else variant
    names = set(model.params)
    if variant is FinetuneVariant.CONTINUE_ALL:
        return frozenset(names)
    layers = {
        FinetuneVariant.DENSE: (),
        FinetuneVariant.ELEC_DENSE: _ELEC,
        FinetuneVariant.ELEC_MAP_DENSE: _ELEC + _MAPS,
    }[variant]
    chosen = {"dense.W", "dense.b"}
    for layer in layers:
        chosen |= {n for n in names if n.startswith(layer + ".")}
    return frozenset(chosen & names)


# --------------------------------------------------------------------------
# training loop


def _check_dataset(ds: Dataset, model: ModelState | None = None) -> None:
    if len(ds) == 0:
        raise ValueError("training set is empty")
    n_left, n_right = ds.class_counts()
    if n_left == 0 or n_right == 0:
        raise ValueError(f"training set has a single class (left={n_left}, right={n_right})")
    if model is not None:
        cfg = model.config
        if (ds.n_channels, ds.n_samples) != (cfg.n_channels, cfg.n_samples):
            raise ValueError(
                f"data trials are {ds.n_channels}x{ds.n_samples}, model expects {cfg.n_channels}x{cfg.n_samples}"
            )


def fit(model: ModelState, ds: Dataset, cfg: TrainConfig, trainable, freeze_bn: bool = False,
        variant: str = "base") -> TrainReport:
    """Train ``trainable`` parameters of ``model`` in place on ``ds``."""
    cfg.validate()
    _check_dataset(ds, model)
    trainable = tuple(n for n in model.params if n in set(trainable))
    X, y = ds.data, ds.labels.astype(np.int64)
    n = len(y)
    adam = {name: AdamState.zeros_like(model.params[name], lr=cfg.lr) for name in trainable}
    losses: list[float] = []
    best, reason = 0, "max_epochs"
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start:start + cfg.batch]
            z, tr = forward(model, X[idx], "train", np.random.default_rng([cfg.seed, epoch, b]), freeze_bn)
            loss, ctx = ops.SOFTMAX_XENT.forward(z, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(tr, ops.SOFTMAX_XENT.backward(ctx)["logits"], wrt=trainable)
            for name in trainable:
                try:
                    model.params[name], adam[name] = adam_update(model.params[name], grads[name], adam[name], name)
                except NonFiniteError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
            if not freeze_bn:
                model.buffers.update(tr.running)
            apply_max_norm(model, trainable)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.info("%s epoch %d loss %.5f", variant, epoch, losses[-1])
        stop, best = early_stop_check(losses, best, cfg)
        if stop:
            reason = "early_stop"
            break
    wall = time.perf_counter() - t0
    acc = evaluate(model, ds).accuracy
    return TrainReport(losses, len(losses), reason, acc, wall, trainable, variant)


def train_base(cfg: TrainConfig, pool: Dataset, arch: ArchConfig | None = None) -> tuple[ModelState, TrainReport]:
    """Subject-independent model on pooled calibration trials (preprocessed)."""
    _check_dataset(pool)
    arch = arch or ArchConfig(n_channels=pool.n_channels, n_samples=pool.n_samples)
    model = build_model(arch, seed=cfg.seed)
    report = fit(model, pool, cfg, model.params.keys(), freeze_bn=False, variant="base")
    return model, report


def finetune(base: ModelState, calib: Dataset, variant: FinetuneVariant | str,
             cfg: TrainConfig) -> tuple[ModelState, TrainReport]:
    """Copy of ``base`` with only the variant's partition updated on ``calib``.

    Outside ``continue-all`` the BN layers stay in inference mode with their
    running statistics and affine parameters untouched.
    """
    variant = FinetuneVariant.parse(variant) if isinstance(variant, str) else variant
    model = base.copy()
    trainable = trainable_partition(model, variant)
    report = fit(model, calib, cfg, trainable, freeze_bn=variant is not FinetuneVariant.CONTINUE_ALL,
                 variant=variant.value)
    return model, report


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    n: int
    accuracy: float
    class_accuracy: tuple[float, float]
    confusion: np.ndarray               # [true][pred], class 0 = left, 1 = right
    subject: str = ""

    @property
    def cells(self) -> dict[str, int]:
        """Confusion cells with right (1) as the positive class."""
        c = self.confusion
        return {"tp": int(c[1, 1]), "fp": int(c[0, 1]), "fn": int(c[1, 0]), "tn": int(c[0, 0])}


def evaluate_predictions(labels, preds, subject: str = "") -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    rows = conf.sum(axis=1)
    class_acc = tuple(float(conf[k, k] / rows[k]) if rows[k] else float("nan") for k in (0, 1))
    return EvalResult(int(labels.size), float(np.trace(conf) / conf.sum()), class_acc, conf, subject)


def evaluate(model: ModelState, ds: Dataset) -> EvalResult:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    cfg = model.config
    if (ds.n_channels, ds.n_samples) != (cfg.n_channels, cfg.n_samples):
        raise ValueError(
            f"data trials are {ds.n_channels}x{ds.n_samples}, model expects {cfg.n_channels}x{cfg.n_samples}"
        )
    preds = predict_from_logits(logits(model, ds.data))
    return evaluate_predictions(ds.labels, preds, ds.subject)


@dataclass
class CrossSubjectReport:
    subjects: list[str]
    accuracy: list[float]
    mean: float
    std: float
    improvement: list[float] | None = None
    improvement_mean: float | None = None
    improvement_std: float | None = None

    def rows(self):
        for i, s in enumerate(self.subjects):
            row = {"subject": s, "accuracy": self.accuracy[i]}
            if self.improvement is not None:
                row["improvement"] = self.improvement[i]
            yield row

    def format(self) -> str:
        lines = [f"{r['subject']}\t{100 * r['accuracy']:.2f}%"
                 + (f"\t{100 * r['improvement']:+.2f}%" if "improvement" in r else "") for r in self.rows()]
        lines.append(f"mean\t{100 * self.mean:.2f} ± {100 * self.std:.2f}%")
        if self.improvement is not None:
            lines.append(f"improvement\t{100 * self.improvement_mean:.2f} ± {100 * self.improvement_std:.2f}%")
        return "\n".join(lines)


def cross_subject_report(accuracies: dict[str, float], base: dict[str, float] | None = None) -> CrossSubjectReport:
    """Mean ± population std (ddof=0) over subjects, optionally with per-subject gains over ``base``."""
    if not accuracies:
        raise ValueError("need at least one subject")
    subjects = list(accuracies)
    acc = np.array([accuracies[s] for s in subjects], dtype=np.float64)
    rep = CrossSubjectReport(subjects, acc.tolist(), float(acc.mean()), float(acc.std()))
    if base is not None:
        gain = acc - np.array([base[s] for s in subjects], dtype=np.float64)
        rep.improvement = gain.tolist()
        rep.improvement_mean = float(gain.mean())
        rep.improvement_std = float(gain.std())
    return rep
