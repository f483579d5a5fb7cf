"""CSV and JSON report writers."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from mirank.train import EvalResult, cross_subject_report

EVAL_HEADER = ("subject", "n_trials", "acc", "tp", "fp", "fn", "tn")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_eval_csv(results: list[EvalResult], path) -> dict:
    """One row per subject, then ``mean`` and ``std`` rows (population std).

    The mean row carries summed confusion cells; the std row leaves them empty.
    Returns the summary as a dict.
    """
    summary = cross_subject_report({r.subject: r.accuracy for r in results})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in results:
            c = r.cells
            w.writerow([r.subject, r.n, _fmt(r.accuracy), c["tp"], c["fp"], c["fn"], c["tn"]])
        totals = {k: sum(r.cells[k] for r in results) for k in ("tp", "fp", "fn", "tn")}
        w.writerow(["mean", sum(r.n for r in results), _fmt(summary.mean),
                    totals["tp"], totals["fp"], totals["fn"], totals["tn"]])
        w.writerow(["std", "", _fmt(summary.std), "", "", "", ""])
    return {"subjects": summary.subjects, "accuracy": summary.accuracy, "mean": summary.mean, "std": summary.std}


def write_electrode_ranks_csv(matrix: np.ndarray, montage, labels, path) -> None:
    """Per-trial electrode ranks (columns in montage order) and a final mean row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "label", *montage])
        for i, row in enumerate(matrix):
            w.writerow([i, int(labels[i]), *map(_fmt, row)])
        w.writerow(["mean", "", *map(_fmt, matrix.mean(axis=0))])


def write_filter_ranks_csv(blocks, path) -> None:
    """Long format: ``layer,filter,rank`` with filter indices starting at 1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "filter", "rank"])
        for layer, vec in enumerate(blocks, 1):
            for j, v in enumerate(vec, 1):
                w.writerow([layer, j, _fmt(v)])


def write_rank_heatmap_csv(rows: dict[str, np.ndarray], montage, path) -> None:
    """Subject x electrode matrix of trial-mean ranks."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", *montage])
        for subject, vec in rows.items():
            w.writerow([subject, *map(_fmt, vec)])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
