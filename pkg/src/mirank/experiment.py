"""End-to-end workflow: synthetic data on disk, base training, fine-tuning, evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from mirank.config import RunConfig
from mirank.data.dataset import Dataset, concat, read_dataset, write_dataset
from mirank.data.protocol import Split, protocol_split
from mirank.data.synth import synth_subject, subject_id
from mirank.model.network import ModelState
from mirank.preprocess import PreprocessConfig, preprocess_many
from mirank.train import EvalResult, FinetuneVariant, TrainReport, evaluate, finetune, train_base

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def prepare(ds: Dataset, cfg: PreprocessConfig) -> Dataset:
    """Preprocessed copy of a raw dataset."""
    if ds.fs != cfg.fs:
        raise ValueError(f"{ds.subject}: data sampled at {ds.fs} Hz, preprocessing configured for {cfg.fs} Hz")
    return ds.with_data(preprocess_many(ds.data, cfg))


def write_synth(cfg: RunConfig, out_dir) -> dict:
    """Generate every subject to ``out_dir`` as EEGT files and write the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.synth.validate()
    subjects = []
    for i in range(sc.n_subjects):
        cal, on = synth_subject(sc, i)
        entry = {"id": subject_id(i)}
        for ds in (cal, on):
            name = f"{ds.subject}_{ds.session}.eegt"
            write_dataset(ds, out / name)
            entry[ds.session] = name
            entry[f"n_{ds.session}"] = len(ds)
        subjects.append(entry)
    ids = [s["id"] for s in subjects]
    manifest = {
        "fs": sc.fs,
        "montage": list(sc.montage),
        "subjects": subjects,
    }
    if len(ids) >= 2:
        split = protocol_split(ids, cfg.n_base)
        manifest["split"] = {"pool": list(split.pool), "roster": list(split.roster)}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


class Manifest:
    def __init__(self, data_dir):
        self.root = Path(data_dir)
        path = self.root / MANIFEST
        if not path.is_file():
            raise FileNotFoundError(f"no {MANIFEST} in {self.root}")
        self.doc = json.loads(path.read_text())
        self.entries = {s["id"]: s for s in self.doc["subjects"]}

    @property
    def subjects(self) -> list[str]:
        return list(self.entries)

    def split(self, n_base: int | None = None) -> Split:
        if n_base is None and "split" in self.doc:
            return Split(tuple(self.doc["split"]["pool"]), tuple(self.doc["split"]["roster"]))
        return protocol_split(self.subjects, n_base)

    def path(self, subject: str, session: str) -> Path:
        if subject not in self.entries:
            raise KeyError(f"subject {subject!r} not in manifest (have {', '.join(self.subjects)})")
        return self.root / self.entries[subject][session]

    def load(self, subject: str, session: str) -> Dataset:
        return read_dataset(self.path(subject, session))


@dataclass
class PipelineResult:
    split: Split
    base_report: TrainReport
    base_eval: dict[str, EvalResult]
    finetuned_eval: dict[str, EvalResult] = field(default_factory=dict)
    finetune_reports: dict[str, TrainReport] = field(default_factory=dict)
    eegnet_report: TrainReport | None = None
    eegnet_eval: dict[str, EvalResult] = field(default_factory=dict)
    base_model: ModelState | None = None

    @staticmethod
    def _mean(results: dict[str, EvalResult]) -> float:
        return sum(r.accuracy for r in results.values()) / len(results)

    def summary(self) -> dict:
        out = {
            "pool": list(self.split.pool),
            "roster": list(self.split.roster),
            "base_mean_acc": self._mean(self.base_eval),
            "base_acc": {s: r.accuracy for s, r in self.base_eval.items()},
            "base_stop_epoch": self.base_report.stop_epoch,
        }
        if self.finetuned_eval:
            out["finetuned_mean_acc"] = self._mean(self.finetuned_eval)
            out["finetuned_acc"] = {s: r.accuracy for s, r in self.finetuned_eval.items()}
        if self.eegnet_eval:
            out["eegnet_mean_acc"] = self._mean(self.eegnet_eval)
            out["eegnet_acc"] = {s: r.accuracy for s, r in self.eegnet_eval.items()}
        return out


def run_pipeline(cfg: RunConfig, variant: FinetuneVariant | str | None = FinetuneVariant.ELEC_MAP_DENSE,
                 eegnet: bool = True) -> PipelineResult:
    """Synthesize in memory, train the base model on the pool, fine-tune and
    evaluate every roster subject; optionally repeat base training with all
    ranking layers disabled."""
    sc = cfg.synth.validate()
    ids = [subject_id(i) for i in range(sc.n_subjects)]
    split = protocol_split(ids, cfg.n_base)
    pool, roster = [], {}
    for i, sid in enumerate(ids):
        cal, on = synth_subject(sc, i)
        if sid in split.pool:
            pool.append(prepare(cal, cfg.preprocess))
        else:
            roster[sid] = (prepare(cal, cfg.preprocess), prepare(on, cfg.preprocess))
    pooled = concat(pool, subject="pool")
    log.info("pool %d trials, roster %d subjects", len(pooled), len(roster))

    base, base_report = train_base(cfg.train, pooled, cfg.arch)
    res = PipelineResult(split, base_report, {s: evaluate(base, on) for s, (_, on) in roster.items()},
                         base_model=base)
    if variant is not None:
        for s, (cal, on) in roster.items():
            model, rep = finetune(base, cal, variant, cfg.finetune)
            res.finetune_reports[s] = rep
            res.finetuned_eval[s] = evaluate(model, on)
    if eegnet:
        arch = replace(cfg.arch, se_layers=())
        plain, res.eegnet_report = train_base(cfg.train, pooled, arch)
        res.eegnet_eval = {s: evaluate(plain, on) for s, (_, on) in roster.items()}
    return res
