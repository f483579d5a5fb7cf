"""Trial container and the EEGT binary file format.

EEGT layout (all little-endian)::

    offset  type      field
    0       4 bytes   magic b"EEGT"
    4       u16       version (1)
    6       u16       n_channels
    8       u32       n_samples
    12      u32       n_trials
    16      f32       fs
    20      u8[n]     labels (0 left, 1 right)
    20+n    f32[...]  samples, trial-major then channel-major

A JSON sidecar next to the binary (same stem, ``.json``) carries the montage
names, subject id and session tag.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EEGT"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIf")

SESSIONS = ("calibration", "online")

# Editable montage metadata: 27 sites covering the frontal and sensorimotor
# electrodes named in the recording protocol.
MONTAGE_27 = (
    "Fp1", "Fp2",
    "AF7", "AF3", "AFz", "AF4", "AF8",
    "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6",
    "C5", "C3", "C1", "Cz", "C2", "C4", "C6",
    "CP5", "CP3", "CP1", "CPz", "CP2", "CP4",
)


class DataFormatError(ValueError):
    """Base class for EEGT read errors."""


class BadMagicError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


@dataclass
class Dataset:
    data: np.ndarray                   # (n_trials, n_channels, n_samples) float32
    labels: np.ndarray                 # (n_trials,) uint8, 0 left / 1 right
    montage: tuple[str, ...] = MONTAGE_27
    fs: float = 500.0
    subject: str = ""
    session: str = "calibration"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.montage = tuple(self.montage)
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be (n_trials, n_channels, n_samples), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.data.shape[0]} trials")
        if self.labels.size and self.labels.max() > 1:
            raise ValueError("labels must be 0 (left) or 1 (right)")
        if len(self.montage) != self.data.shape[1]:
            raise ValueError(f"montage lists {len(self.montage)} electrodes, data has {self.data.shape[1]}")
        if self.fs <= 0:
            raise ValueError("fs must be positive")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))

    def with_data(self, data: np.ndarray) -> "Dataset":
        return Dataset(data, self.labels.copy(), self.montage, self.fs, self.subject, self.session)


def concat(datasets: list[Dataset], subject: str = "pool") -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.data.shape[1:] != first.data.shape[1:] or ds.fs != first.fs or ds.montage != first.montage:
            raise ValueError(f"dataset {ds.subject} does not match {first.subject} in shape, fs or montage")
    return Dataset(
        np.concatenate([d.data for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        first.montage, first.fs, subject, first.session,
    )


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    n, c, s = ds.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, c, s, n, ds.fs))
        fh.write(ds.labels.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())
    meta = {"montage": list(ds.montage), "subject": ds.subject, "session": ds.session}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an EEGT file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, c, s, n, fs = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: EEGT version {version}, this reader handles {VERSION}")
    expected = _HEADER.size + n + 4 * n * c * s
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: payload truncated ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise DataFormatError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size).copy()
    data = np.frombuffer(raw, dtype="<f4", count=n * c * s, offset=_HEADER.size + n)
    data = data.reshape(n, c, s).astype(np.float32)

    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    montage = tuple(meta.get("montage") or (MONTAGE_27 if c == 27 else (f"ch{i}" for i in range(c))))
    return Dataset(data, labels, montage, float(fs), meta.get("subject", path.stem), meta.get("session", "calibration"))
