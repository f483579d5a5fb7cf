import numpy as np
import pytest

from mirank.data.dataset import Dataset
from mirank.model.network import ArchConfig

TINY_MONTAGE = ("C3", "Cz", "C4", "Pz")


def tiny_arch(**kw) -> ArchConfig:
    """Small network used wherever the full 27x2000 model is not needed."""
    base = dict(n_channels=4, n_samples=64, kern_t=8, kern_s=4)
    base.update(kw)
    return ArchConfig(**base)


def separable_dataset(n_per_class=16, seed=0, subject="toy", n_samples=64) -> Dataset:
    """Two classes told apart by which channel carries a strong oscillation."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class).astype(np.uint8)
    rng.shuffle(labels)
    t = np.arange(n_samples) / 64.0
    data = 0.3 * rng.standard_normal((len(labels), 4, n_samples))
    wave = 2.0 * np.sin(2 * np.pi * 6 * t)
    for i, y in enumerate(labels):
        data[i, 0 if y == 0 else 2] += wave
    return Dataset(data.astype(np.float32), labels, TINY_MONTAGE, 64.0, subject, "calibration")


@pytest.fixture
def toy_data():
    return separable_dataset()


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
