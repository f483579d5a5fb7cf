"""Subject split between the base-training pool and the fine-tune/evaluation roster."""
from __future__ import annotations

from dataclasses import dataclass

BASE_FRACTION = 7 / 20


@dataclass(frozen=True)
class Split:
    pool: tuple[str, ...]      # calibration data pooled for the base model
    roster: tuple[str, ...]    # each fine-tuned on calibration, evaluated on online


def protocol_split(subjects, n_base: int | None = None) -> Split:
    """First ``n_base`` subjects form the pool, the rest the roster.

    ``n_base`` defaults to 35% of the subjects (7 of 20), at least one on each side.
    """
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ValueError(f"protocol split needs at least 2 subjects, got {len(subjects)}")
    if len(set(subjects)) != len(subjects):
        raise ValueError("duplicate subject ids")
    if n_base is None:
        n_base = round(BASE_FRACTION * len(subjects))
    n_base = min(max(int(n_base), 1), len(subjects) - 1)
    return Split(tuple(subjects[:n_base]), tuple(subjects[n_base:]))
