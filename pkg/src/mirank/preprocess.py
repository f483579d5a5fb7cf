"""EEG conditioning chain: bandpass, notch, baseline correction, CAR, epoching.

Filtering is causal (single pass, zero initial conditions). Filter design and
the per-section direct-form-II-transposed recursion come from
``scipy.signal``; ``frequency_response`` evaluates the cascade on the unit
circle directly from the stored coefficients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from mirank.core.ops import NonFiniteError


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with ``a0 == 1``."""

    sections: np.ndarray               # (n_sections, 5), float64
    kind: str = ""
    order: int = 0
    corners: tuple[float, ...] = ()
    fs: float = 0.0

    def sos(self) -> np.ndarray:
        """Coefficients in scipy's (b0, b1, b2, 1, a1, a2) layout."""
        s = self.sections
        return np.column_stack([s[:, 0], s[:, 1], s[:, 2], np.ones(len(s)), s[:, 3], s[:, 4]])

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:]])

    def is_stable(self, margin: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1 - margin))


def _from_sos(sos: np.ndarray, **meta) -> BiquadCascade:
    sos = np.asarray(sos, dtype=np.float64)
    sections = sos[:, [0, 1, 2, 4, 5]] / sos[:, [3]]
    cascade = BiquadCascade(sections, **meta)
    if not np.all(np.isfinite(sections)):
        raise FilterDesignError(f"{cascade.kind}: non-finite coefficients")
    if not cascade.is_stable():
        raise FilterDesignError(f"{cascade.kind}: unstable section")
    return cascade


def design_butter_bandpass(order: int = 5, lo: float = 0.5, hi: float = 90.0, fs: float = 500.0) -> BiquadCascade:
    """Digital Butterworth bandpass (bilinear transform, prewarped corners).

    An order-``n`` prototype gives ``n`` second-order sections.
    """
    if not 0 < lo < hi < fs / 2:
        raise FilterDesignError(f"bandpass corners must satisfy 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}")
    if order < 1:
        raise FilterDesignError("filter order must be >= 1")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return _from_sos(sos, kind="butter_bandpass", order=order, corners=(lo, hi), fs=fs)


def design_notch(f0: float = 50.0, q: float = 30.0, fs: float = 500.0) -> BiquadCascade:
    """Single-section IIR notch at ``f0`` with quality factor ``q``."""
    if not 0 < f0 < fs / 2:
        raise FilterDesignError(f"notch frequency must satisfy 0 < f0 < fs/2, got {f0} (fs={fs})")
    if q <= 0:
        raise FilterDesignError("notch Q must be positive")
    b, a = signal.iirnotch(f0, q, fs=fs)
    return _from_sos(np.concatenate([b, a])[None], kind="notch", order=2, corners=(f0,), fs=fs)


def frequency_response(filt: BiquadCascade, freqs_hz, fs: float | None = None) -> np.ndarray:
    """Complex response ``H(e^{jw})`` of the cascade at the given frequencies."""
    fs = fs or filt.fs
    z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
    zi = 1 / z
    h = np.ones_like(z)
    for b0, b1, b2, a1, a2 in filt.sections:
        h *= (b0 + b1 * zi + b2 * zi**2) / (1 + a1 * zi + a2 * zi**2)
    return h


def gain_db(filt: BiquadCascade, freqs_hz) -> np.ndarray:
    return 20 * np.log10(np.abs(frequency_response(filt, freqs_hz)))


def apply_cascade(x: np.ndarray, filt: BiquadCascade) -> np.ndarray:
    """Causal filtering along the last axis with zero initial conditions."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("apply_cascade: input contains NaN or Inf")
    y = signal.sosfilt(filt.sos(), x.astype(np.float64, copy=False), axis=-1)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError(f"apply_cascade: {filt.kind or 'filter'} produced non-finite output")
    return y


def baseline_correct(trial: np.ndarray, window: slice | None = None) -> np.ndarray:
    """Subtract from each channel its mean over ``window`` (default: the whole trial)."""
    ref = trial if window is None else trial[..., window]
    if ref.shape[-1] < 1:
        raise ValueError("baseline_correct: empty reference window")
    return trial - ref.mean(axis=-1, keepdims=True)


def car(trial: np.ndarray) -> np.ndarray:
    """Common average reference: subtract the cross-channel mean at every sample."""
    if trial.shape[-2] < 2:
        raise ValueError("car: needs at least two channels")
    return trial - trial.mean(axis=-2, keepdims=True)


@dataclass(frozen=True)
class PreprocessConfig:
    fs: float = 500.0
    band_order: int = 5
    band_lo: float = 0.5
    band_hi: float = 90.0
    notch: bool = True
    notch_f0: float = 50.0
    notch_q: float = 30.0
    epoch_start_s: float = 1.5   # MI cue onset within the raw trial
    epoch_len_s: float = 4.0
    baseline: str = "epoch"      # "epoch" (mean of the MI window) or "fixation" (pre-cue interval)

    @property
    def epoch_samples(self) -> int:
        return int(round(self.epoch_len_s * self.fs))

    @property
    def epoch_start(self) -> int:
        return int(round(self.epoch_start_s * self.fs))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Chain:
    """Designed filters for one config, reusable across trials."""

    cfg: PreprocessConfig
    bandpass: BiquadCascade = field(init=False)
    notch: BiquadCascade | None = field(init=False)

    def __post_init__(self):
        c = self.cfg
        if c.baseline not in ("epoch", "fixation"):
            raise ValueError(f"baseline must be 'epoch' or 'fixation', got {c.baseline!r}")
        self.bandpass = design_butter_bandpass(c.band_order, c.band_lo, c.band_hi, c.fs)
        self.notch = design_notch(c.notch_f0, c.notch_q, c.fs) if c.notch else None

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return preprocess_trial(raw, self.cfg, chain=self)


def preprocess_trial(raw: np.ndarray, cfg: PreprocessConfig | None = None, chain: Chain | None = None) -> np.ndarray:
    """bandpass -> notch -> baseline -> CAR -> MI epoch, as float32 (N_c, epoch_samples).

    Accepts one raw trial (N_c, N_raw) or a stack (n, N_c, N_raw).
    """
    cfg = cfg or PreprocessConfig()
    chain = chain or Chain(cfg)
    raw = np.asarray(raw)
    start, n = cfg.epoch_start, cfg.epoch_samples
    if raw.shape[-1] < start + n:
        raise ValueError(
            f"raw trial has {raw.shape[-1]} samples; the MI window needs {start + n} "
            f"({cfg.epoch_start_s} s onset + {cfg.epoch_len_s} s at {cfg.fs} Hz)"
        )
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("preprocess_trial: raw data contains NaN or Inf")
    x = apply_cascade(raw, chain.bandpass)
    if chain.notch is not None:
        x = apply_cascade(x, chain.notch)
    if cfg.baseline == "epoch":
        x = baseline_correct(x, slice(start, start + n))
    else:
        if start < 1:
            raise ValueError("fixation baseline needs a pre-cue interval")
        x = baseline_correct(x, slice(0, start))
    x = car(x)
    return np.ascontiguousarray(x[..., start:start + n], dtype=np.float32)


def preprocess_many(raw: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Preprocess a stack of raw trials (n, N_c, N_raw) in bounded-memory chunks."""
    cfg = cfg or PreprocessConfig()
    chain = Chain(cfg)
    out = np.empty((raw.shape[0], raw.shape[1], cfg.epoch_samples), dtype=np.float32)
    for i in range(0, raw.shape[0], 16):
        out[i:i + 16] = preprocess_trial(raw[i:i + 16], cfg, chain)
    return out
