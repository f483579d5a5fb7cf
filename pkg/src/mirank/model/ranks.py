"""Rank extraction from the ranking layers of a trained model."""
from __future__ import annotations

import numpy as np

from mirank.model.network import ModelState, forward

FILTER_STAGES = ("map1", "map2", "map3")


def collect_ranks(model: ModelState, data: np.ndarray, stages, chunk: int = 32) -> dict[str, np.ndarray]:
    """Per-trial rank vectors for the named ranking layers (inference mode)."""
    if len(data) == 0:
        raise ValueError("cannot extract ranks from an empty dataset")
    missing = [s for s in stages if not model.has(s)]
    if missing:
        raise ValueError(f"model has no ranking layer(s) {missing}")
    parts: dict[str, list[np.ndarray]] = {s: [] for s in stages}
    for i in range(0, len(data), chunk):
        _, tr = forward(model, data[i:i + chunk], "infer")
        for s in stages:
            parts[s].append(tr.ranks[s])
    return {s: np.concatenate(v).astype(np.float64) for s, v in parts.items()}


def extract_electrode_ranks(model: ModelState, trials) -> tuple[np.ndarray, np.ndarray]:
    """Input-stage electrode ranks: per-trial matrix (n, N_c) and its column mean."""
    data = getattr(trials, "data", trials)
    mat = collect_ranks(model, data, ("elec_in",))["elec_in"]
    return mat, mat.mean(axis=0)


def extract_filter_ranks(model: ModelState, trials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trial-averaged feature-map ranks of the three stages (8, 16, 16)."""
    data = getattr(trials, "data", trials)
    ranks = collect_ranks(model, data, FILTER_STAGES)
    return tuple(ranks[s].mean(axis=0) for s in FILTER_STAGES)
