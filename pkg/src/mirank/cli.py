"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O or data-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from mirank.config import ConfigError, RunConfig, load_config
from mirank.data.dataset import DataFormatError, Dataset, read_dataset

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mirank")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or (), getattr(args, "seed", None))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_bytes(b"")
    probe.unlink()
    return out


def _resolve_data(spec: str, session: str, roster_only: bool, cfg: RunConfig) -> list[Dataset]:
    """An EEGT file, or a data directory with a manifest (roster subjects' ``session`` files)."""
    from mirank.experiment import Manifest

    p = Path(spec)
    if p.is_dir():
        man = Manifest(p)
        subjects = man.split(cfg.n_base).roster if roster_only else man.subjects
        return [man.load(s, session) for s in subjects]
    if not p.is_file():
        raise FileNotFoundError(f"data not found: {p}")
    return [read_dataset(p)]


def _prepare(ds: Dataset, cfg: RunConfig, preprocessed: bool) -> Dataset:
    from mirank.experiment import prepare

    return ds if preprocessed else prepare(ds, cfg.preprocess)


def _models_for(spec: str, subjects: list[str]):
    """One checkpoint for everyone, or ``DIR/<subject>/model.semd`` per subject."""
    from mirank.model import checkpoint

    p = Path(spec)
    if p.is_dir():
        out = {}
        for s in subjects:
            f = p / s / "model.semd"
            if not f.is_file():
                raise FileNotFoundError(f"no checkpoint for subject {s} at {f}")
            out[s] = checkpoint.load(f)
        return out
    model = checkpoint.load(p)
    return {s: model for s in subjects}


def _check_shape(model, ds: Dataset) -> None:
    cfg = model.config
    if (ds.n_channels, ds.n_samples) != (cfg.n_channels, cfg.n_samples):
        raise DataFormatError(
            f"{ds.subject}: trials are {ds.n_channels}x{ds.n_samples}, model expects "
            f"{cfg.n_channels}x{cfg.n_samples}"
        )


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from mirank.experiment import write_synth

    cfg = _config(args)
    out = _out_dir(args.out)
    manifest = write_synth(cfg, out)
    cfg.write(out)
    n = sum(s["n_calibration"] + s["n_online"] for s in manifest["subjects"])
    print(f"wrote {len(manifest['subjects'])} subjects ({n} trials) to {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    from dataclasses import replace

    from mirank.data.dataset import concat
    from mirank.experiment import Manifest
    from mirank.model import checkpoint
    from mirank.train import train_base

    cfg = _config(args)
    if args.no_se:
        cfg = replace(cfg, arch=replace(cfg.arch, se_layers=()))
    man = Manifest(args.data)
    split = man.split(cfg.n_base)
    pool = concat([_prepare(man.load(s, "calibration"), cfg, False) for s in split.pool], subject="pool")
    out = _out_dir(args.out)
    model, report = train_base(cfg.train, pool, cfg.arch)
    checkpoint.save(model, out / "model.semd")
    report.write(out, "train")
    cfg.write(out)
    print(f"base model: {report.stop_epoch} epochs ({report.stop_reason}), "
          f"train accuracy {100 * report.train_accuracy:.2f}%, pool {', '.join(split.pool)}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from mirank.experiment import Manifest
    from mirank.model import checkpoint
    from mirank.reports import write_json
    from mirank.train import FinetuneVariant, finetune, trainable_partition

    cfg = _config(args)
    variant = FinetuneVariant.parse(args.variant)
    base = checkpoint.load(args.base)
    if args.subject == "all":
        if not args.data:
            raise UsageError("--subject all needs --data DIR")
        man = Manifest(args.data)
        targets = [(s, man.load(s, "calibration")) for s in man.split(cfg.n_base).roster]
    elif Path(args.subject).is_file():
        ds = read_dataset(args.subject)
        targets = [(ds.subject, ds)]
    elif args.data:
        man = Manifest(args.data)
        targets = [(args.subject, man.load(args.subject, "calibration"))]
    else:
        raise UsageError(f"--subject {args.subject!r} is not a file; pass --data DIR to resolve subject ids")

    out = _out_dir(args.out)
    before = checkpoint.tensor_digests(base)
    for sid, raw in targets:
        ds = _prepare(raw, cfg, args.preprocessed)
        _check_shape(base, ds)
        model, report = finetune(base, ds, variant, cfg.finetune)
        dest = out / sid if len(targets) > 1 or args.subject == "all" else out
        dest.mkdir(parents=True, exist_ok=True)
        checkpoint.save(model, dest / "model.semd")
        report.write(dest, "finetune")
        after = checkpoint.tensor_digests(model)
        trainable = trainable_partition(base, variant)
        frozen = sorted(set(before) - set(trainable)) if variant is not FinetuneVariant.CONTINUE_ALL else []
        changed = [n for n in frozen if before[n] != after[n]]
        write_json({"subject": sid, "variant": variant.value, "frozen": frozen,
                    "frozen_unchanged": not changed, "changed": changed}, dest / "frozen_check.json")
        print(f"{sid}: {variant.value} fine-tune, {report.stop_epoch} epochs, "
              f"train accuracy {100 * report.train_accuracy:.2f}%")
        if changed:
            print(f"{sid}: frozen tensors changed: {', '.join(changed)}", file=sys.stderr)
            return EXIT_VERIFY
    cfg.write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from mirank.reports import write_eval_csv, write_json
    from mirank.train import cross_subject_report, evaluate

    cfg = _config(args)
    datasets = _resolve_data(args.data, "online", roster_only=True, cfg=cfg)
    models = _models_for(args.model, [d.subject for d in datasets])
    out = _out_dir(args.out)
    results = []
    for raw in datasets:
        ds = _prepare(raw, cfg, args.preprocessed)
        model = models[raw.subject]
        _check_shape(model, ds)
        results.append(evaluate(model, ds))
    summary = write_eval_csv(results, out / "eval.csv")
    write_json(summary, out / "eval_summary.json")
    cfg.write(out)
    print(cross_subject_report({r.subject: r.accuracy for r in results}).format())
    return EXIT_OK


def cmd_ranks(args) -> int:
    from mirank.model.ranks import extract_electrode_ranks, extract_filter_ranks
    from mirank.reports import write_electrode_ranks_csv, write_filter_ranks_csv, write_rank_heatmap_csv

    cfg = _config(args)
    datasets = _resolve_data(args.data, args.session, roster_only=True, cfg=cfg)
    models = _models_for(args.model, [d.subject for d in datasets])
    out = _out_dir(args.out)
    single = len(datasets) == 1 and not Path(args.data).is_dir()
    heat = {}
    for raw in datasets:
        ds = _prepare(raw, cfg, args.preprocessed)
        model = models[raw.subject]
        _check_shape(model, ds)
        prefix = "" if single else f"{ds.subject}_"
        if model.has("elec_in"):
            mat, mean = extract_electrode_ranks(model, ds)
            write_electrode_ranks_csv(mat, ds.montage, ds.labels, out / f"{prefix}electrode_ranks.csv")
            heat[ds.subject] = mean
        if all(model.has(s) for s in ("map1", "map2", "map3")):
            write_filter_ranks_csv(extract_filter_ranks(model, ds), out / f"{prefix}filter_ranks.csv")
    if heat and not single:
        write_rank_heatmap_csv(heat, datasets[0].montage, out / "electrode_rank_heatmap.csv")
    if not heat:
        print("model has no input electrode ranking layer; no electrode ranks written", file=sys.stderr)
    cfg.write(out)
    print(f"rank exports written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from mirank.core.gradcheck import TOL, run_suite

    t0 = time.perf_counter()
    results = run_suite(args.seed, instances=args.instances, perturb=args.perturb)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{r.name:28s} n={r.instances:3d}  max_rel_err={r.max_rel_err:.3e}  {'ok' if r.ok else 'FAIL'}")
    print(f"{len(results)} ops checked in {time.perf_counter() - t0:.1f} s (tolerance {TOL:g})")
    if failed:
        print("gradient check failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from mirank.experiment import run_pipeline
    from mirank.reports import write_json

    cfg = _config(args)
    out = _out_dir(args.out)
    res = run_pipeline(cfg, args.variant, eegnet=not args.no_eegnet)
    summary = res.summary()
    write_json(summary, out / "pipeline_summary.json")
    cfg.write(out)
    print(f"base mean online accuracy {100 * summary['base_mean_acc']:.2f}%")
    if "finetuned_mean_acc" in summary:
        print(f"{args.variant} fine-tuned mean accuracy {100 * summary['finetuned_mean_acc']:.2f}%")
    if "eegnet_mean_acc" in summary:
        print(f"EEGNet (no ranking layers) mean accuracy {100 * summary['eegnet_mean_acc']:.2f}%")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


VARIANTS = ("continue-all", "dense", "elec-dense", "elec-map-dense")


def _add_config(p, seed=True):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (JSON literal); repeatable, wins over --config")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (overrides synth/train seeds)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic subjects as EEGT files plus a manifest")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-base", help="train the subject-independent model on the pool subjects")
    _add_config(p)
    p.add_argument("--data", required=True, help="directory written by 'synth' (with manifest.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-se", action="store_true", help="disable every ranking layer (EEGNet baseline)")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("finetune", help="fine-tune a base checkpoint on subject calibration data")
    _add_config(p)
    p.add_argument("--base", required=True, help="base SEMD checkpoint")
    p.add_argument("--subject", required=True, help="EEGT file, a subject id (with --data), or 'all'")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data", help="data directory for subject ids")
    p.add_argument("--out", required=True)
    p.add_argument("--preprocessed", action="store_true", help="input trials are already preprocessed")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="online accuracy per subject with a cross-subject summary")
    _add_config(p)
    p.add_argument("--model", required=True, help="SEMD checkpoint, or a directory of <subject>/model.semd")
    p.add_argument("--data", required=True, help="EEGT file or data directory (roster online sessions)")
    p.add_argument("--out", required=True)
    p.add_argument("--preprocessed", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ranks", help="export electrode and filter ranks as CSV")
    _add_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session", default="online", choices=("calibration", "online"))
    p.add_argument("--preprocessed", action="store_true")
    p.set_defaults(func=cmd_ranks)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--perturb", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="synthesize, train, fine-tune and evaluate in one run")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="elec-map-dense", choices=VARIANTS)
    p.add_argument("--no-eegnet", action="store_true", help="skip the EEGNet baseline run")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mirank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"mirank: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mirank: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
