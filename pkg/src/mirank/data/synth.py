"""Synthetic two-class motor-imagery EEG.

Each raw trial is a fixation interval followed by the MI window. Every
channel carries pink background noise, a 50 Hz line component and a DC
offset. A narrowband mu rhythm (per-subject centre frequency in 8-12 Hz) is
projected onto a left-hemisphere and a right-hemisphere electrode group.
During the MI window the group contralateral to the imagined direction is
desynchronized, so the left/right group amplitude ratio is ``mu_ratio`` for
class 0 and ``1 / mu_ratio`` for class 1. Sources are then mixed by a
per-subject matrix ``I + mixing * R / sqrt(N_c)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from mirank.data.dataset import MONTAGE_27, Dataset

LEFT_GROUP = ("FC3", "C3", "CP1")
RIGHT_GROUP = ("FC4", "C4", "CP4")


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 20
    calib_per_class: int = 36
    online_per_class: int = 24
    fs: float = 500.0
    fixation_s: float = 1.5
    epoch_s: float = 4.0
    mu_band: tuple[float, float] = (8.0, 12.0)
    mu_width_hz: float = 2.0
    mu_amp: float = 1.0
    mu_ratio: float = 2.5
    pink_level: float = 1.0
    line_amp: float = 2.0
    dc_range: float = 20.0
    mixing: float = 0.15
    seed: int = 0
    mixing_seed: int | None = None
    montage: tuple[str, ...] = field(default=MONTAGE_27)

    def __post_init__(self):
        object.__setattr__(self, "mu_band", tuple(self.mu_band))
        object.__setattr__(self, "montage", tuple(self.montage))

    def validate(self) -> "SynthConfig":
        problems = []
        if self.n_subjects < 1:
            problems.append("n_subjects must be >= 1")
        if self.calib_per_class < 0 or self.online_per_class < 0:
            problems.append("trial counts must be >= 0")
        if self.mu_ratio <= 1:
            problems.append("mu_ratio must be > 1 to separate the classes")
        for name in ("mu_amp", "pink_level", "line_amp", "dc_range", "mixing", "mu_width_hz"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        lo, hi = self.mu_band
        if not 0 < lo < hi < self.fs / 2:
            problems.append("mu_band must lie inside (0, fs/2)")
        if self.fs <= 0 or self.epoch_s <= 0 or self.fixation_s < 0:
            problems.append("fs and epoch_s must be positive, fixation_s non-negative")
        missing = [ch for ch in LEFT_GROUP + RIGHT_GROUP if ch not in self.montage]
        if missing:
            problems.append(f"montage lacks group electrodes {missing}")
        if problems:
            raise ValueError("invalid synth config: " + "; ".join(problems))
        return self

    @property
    def n_raw(self) -> int:
        return int(round((self.fixation_s + self.epoch_s) * self.fs))

    @property
    def cue_sample(self) -> int:
        return int(round(self.fixation_s * self.fs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu_band"] = list(self.mu_band)
        d["montage"] = list(self.montage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def subject_id(i: int) -> str:
    return f"S{i + 1:02d}"


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.fft.rfftfreq(n, 1 / fs)
    f[0] = f[1]
    x = np.fft.irfft(spec / np.sqrt(f), n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def narrowband(rng: np.random.Generator, shape: tuple[int, ...], fs: float, lo: float, hi: float) -> np.ndarray:
    """Unit-variance noise confined to ``[lo, hi]`` Hz along the last axis."""
    n = shape[-1]
    f = np.fft.rfftfreq(n, 1 / fs)
    spec = rng.standard_normal(shape[:-1] + (f.size,)) + 1j * rng.standard_normal(shape[:-1] + (f.size,))
    spec[..., (f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


@dataclass
class SubjectModel:
    mixing: np.ndarray      # (N_c, N_c)
    mu_freq: float
    gain: float


def subject_model(cfg: SynthConfig, index: int) -> SubjectModel:
    base = cfg.seed if cfg.mixing_seed is None else cfg.mixing_seed
    rng = np.random.default_rng([base, 1, index])
    nc = len(cfg.montage)
    mixing = np.eye(nc) + cfg.mixing * rng.standard_normal((nc, nc)) / np.sqrt(nc)
    lo, hi = cfg.mu_band
    half = cfg.mu_width_hz / 2
    mu_freq = rng.uniform(lo + half, hi - half) if hi - lo > cfg.mu_width_hz else (lo + hi) / 2
    return SubjectModel(mixing, float(mu_freq), float(rng.uniform(0.8, 1.2)))


def generate_trials(cfg: SynthConfig, sm: SubjectModel, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Raw trials (n, N_c, n_raw) for the given labels."""
    nc, n_raw, fs = len(cfg.montage), cfg.n_raw, cfg.fs
    idx = {name: i for i, name in enumerate(cfg.montage)}
    left = [idx[c] for c in LEFT_GROUP]
    right = [idx[c] for c in RIGHT_GROUP]
    t = np.arange(n_raw) / fs
    cue = cfg.cue_sample
    half = cfg.mu_width_hz / 2
    out = np.empty((len(labels), nc, n_raw), dtype=np.float32)
    for k, y in enumerate(labels):
        src = cfg.pink_level * pink_noise(rng, (nc, n_raw), fs)
        mu = narrowband(rng, (2, n_raw), fs, sm.mu_freq - half, sm.mu_freq + half)
        env = np.ones((2, n_raw))
        weak = cfg.mu_amp / cfg.mu_ratio
        if y == 0:
            env[1, cue:] = weak / cfg.mu_amp if cfg.mu_amp else 0.0   # right hemisphere desynchronizes
        else:
            env[0, cue:] = weak / cfg.mu_amp if cfg.mu_amp else 0.0
        mu = cfg.mu_amp * env * mu
        src[left] += mu[0]
        src[right] += mu[1]
        x = sm.gain * (sm.mixing @ src)
        phase = rng.uniform(0, 2 * np.pi, (nc, 1))
        line_gain = cfg.line_amp * rng.uniform(0.5, 1.5, (nc, 1))
        x += line_gain * np.sin(2 * np.pi * 50.0 * t + phase)
        x += rng.uniform(-cfg.dc_range, cfg.dc_range, (nc, 1))
        out[k] = x
    return out


def _balanced_labels(rng: np.random.Generator, per_class: int) -> np.ndarray:
    labels = np.repeat(np.array([0, 1], dtype=np.uint8), per_class)
    return rng.permutation(labels)


def synth_subject(cfg: SynthConfig, index: int) -> tuple[Dataset, Dataset]:
    """Calibration and online raw datasets for subject ``index`` (0-based)."""
    sm = subject_model(cfg, index)
    rng = np.random.default_rng([cfg.seed, 2, index])
    sid = subject_id(index)
    out = []
    for session, per_class in (("calibration", cfg.calib_per_class), ("online", cfg.online_per_class)):
        labels = _balanced_labels(rng, per_class)
        data = generate_trials(cfg, sm, labels, rng)
        out.append(Dataset(data, labels, cfg.montage, cfg.fs, sid, session))
    return out[0], out[1]


def synth_generate(cfg: SynthConfig | None = None) -> dict[str, tuple[Dataset, Dataset]]:
    """``{subject id: (calibration, online)}`` for every subject, fully seeded."""
    cfg = (cfg or SynthConfig()).validate()
    return {subject_id(i): synth_subject(cfg, i) for i in range(cfg.n_subjects)}
