import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal

from mirank.core.ops import NonFiniteError
from mirank.preprocess import (
    BiquadCascade,
    Chain,
    FilterDesignError,
    PreprocessConfig,
    apply_cascade,
    baseline_correct,
    car,
    design_butter_bandpass,
    design_notch,
    frequency_response,
    gain_db,
    preprocess_many,
    preprocess_trial,
)

FS = 500.0


def test_bandpass_structure():
    bp = design_butter_bandpass()
    assert bp.sections.shape == (5, 5)
    assert bp.is_stable()
    assert np.all(np.abs(bp.poles()) < 1 - 1e-9)


def test_bandpass_gains():
    bp = design_butter_bandpass()
    centre = np.sqrt(0.5 * 90)
    grid = np.linspace(1, 80, 2000)
    assert abs(gain_db(bp, [centre])[0] - gain_db(bp, grid).max()) <= 1.0
    lo, hi = gain_db(bp, [0.5, 90.0])
    assert abs(lo + 3) <= 0.5 and abs(hi + 3) <= 0.5
    assert gain_db(bp, [180.0])[0] <= -25


def test_response_oracle_agrees_with_scipy():
    bp = design_butter_bandpass()
    f = np.array([0.5, 6.7, 50.0, 90.0, 180.0])
    _, h = signal.sosfreqz(bp.sos(), worN=f, fs=FS)
    np.testing.assert_allclose(frequency_response(bp, f), h, rtol=1e-9)


def test_notch_gains():
    n = design_notch(50, 30, FS)
    assert n.sections.shape == (1, 5)
    g50, g45, g55 = gain_db(n, [50.0, 45.0, 55.0])
    assert g50 <= -30 and g45 >= -1 and g55 >= -1
    assert abs(gain_db(n, [0.0])[0]) <= 1e-6


@pytest.mark.parametrize("args", [(5, 0.0, 90, FS), (5, 10, 5, FS), (5, 1, 260, FS)])
def test_bandpass_range_errors(args):
    with pytest.raises(FilterDesignError):
        design_butter_bandpass(*args)


@pytest.mark.parametrize("args", [(0, 30, FS), (250, 30, FS), (50, 0, FS)])
def test_notch_range_errors(args):
    with pytest.raises(FilterDesignError):
        design_notch(*args)


def test_apply_trivial_cases():
    bp = design_butter_bandpass()
    assert not apply_cascade(np.zeros((2, 100)), bp).any()
    ident = BiquadCascade(np.array([[1.0, 0, 0, 0, 0]]), fs=FS)
    imp = np.zeros(10)
    imp[0] = 1
    np.testing.assert_array_equal(apply_cascade(imp, ident), imp)


def test_notch_steady_state_amplitude():
    n = design_notch(50, 30, FS)
    t = np.arange(int(20 * FS)) / FS
    y = apply_cascade(np.sin(2 * np.pi * 50 * t), n)
    tail = y[-int(2 * FS):]
    amp = np.sqrt(2) * np.sqrt(np.mean(tail**2))
    expected = abs(frequency_response(n, [50.0])[0])
    # the notch depth is tiny; compare on an absolute scale as well
    assert amp <= expected * 1.05 + 1e-6


def test_notch_passes_nearby_tone():
    n = design_notch(50, 30, FS)
    t = np.arange(int(10 * FS)) / FS
    y = apply_cascade(np.sin(2 * np.pi * 45 * t), n)
    amp = np.sqrt(2) * np.sqrt(np.mean(y[-int(2 * FS):] ** 2))
    assert abs(amp - abs(frequency_response(n, [45.0])[0])) / amp < 0.05


def test_probe_with_and_without_notch():
    t = np.arange(int(10 * FS)) / FS
    probe = np.sin(2 * np.pi * 50 * t)[None]
    cfg = PreprocessConfig()
    chain = Chain(cfg)
    banded = apply_cascade(probe, chain.bandpass)
    only_band = banded[:, -1000:]
    both = apply_cascade(banded, chain.notch)[:, -1000:]
    rms = lambda a: np.sqrt(np.mean(a**2))
    assert 20 * np.log10(rms(only_band) / rms(probe)) >= -1
    assert 20 * np.log10(rms(both) / rms(probe)) <= -30


def test_apply_is_linear():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 500))
    bp = design_butter_bandpass()
    np.testing.assert_allclose(apply_cascade(2.5 * x, bp), 2.5 * apply_cascade(x, bp), rtol=1e-6, atol=1e-12)


def test_apply_non_finite():
    bp = design_butter_bandpass()
    with pytest.raises(NonFiniteError):
        apply_cascade(np.array([1.0, np.inf]), bp)
    unstable = BiquadCascade(np.array([[1.0, 0, 0, -2.5, 1.6]]), kind="bad")
    with pytest.raises(NonFiniteError):
        apply_cascade(np.ones(5000), unstable)


def test_baseline_and_car_examples():
    assert not baseline_correct(np.full((1, 6), 7.0)).any()
    assert baseline_correct(np.array([[1.0, 3.0]])).tolist() == [[-1.0, 1.0]]
    assert car(np.array([[1.0], [3.0]])).tolist() == [[-1.0], [1.0]]
    assert not car(np.tile(np.arange(5.0), (3, 1))).any()
    with pytest.raises(ValueError):
        car(np.ones((1, 4)))


@settings(max_examples=50)
@given(arrays(np.float64, (5, 40), elements=st.floats(-1e4, 1e4)))
def test_baseline_and_car_properties(x):
    assert np.all(np.abs(baseline_correct(x).mean(axis=1)) <= 1e-9 * max(1, np.abs(x).max()))
    assert np.all(np.abs(car(x).mean(axis=0)) <= 1e-9 * max(1, np.abs(x).max()))


def raw_trials(n=3, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(2750) / FS
    return rng.standard_normal((n, 27, 2750)) * 5 + 20 + 3 * np.sin(2 * np.pi * 50 * t)


def test_preprocess_shape_and_invariants():
    raw = raw_trials(1)[0]
    out = preprocess_trial(raw)
    assert out.shape == (27, 2000) and out.dtype == np.float32
    assert np.abs(out.astype(np.float64).mean(axis=0)).max() <= 1e-6
    assert not preprocess_trial(np.zeros((27, 2750))).any()


def test_preprocess_is_bit_deterministic():
    raw = raw_trials(2)
    a, b = preprocess_many(raw), preprocess_many(raw.copy())
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(a[1], preprocess_trial(raw[1]))


def test_preprocess_errors():
    with pytest.raises(ValueError, match="samples"):
        preprocess_trial(np.zeros((27, 2000)))
    bad = np.zeros((27, 2750))
    bad[3, 10] = np.nan
    with pytest.raises(NonFiniteError):
        preprocess_trial(bad)
    with pytest.raises(ValueError):
        Chain(PreprocessConfig(baseline="median"))


def test_fixation_baseline_option():
    out = preprocess_trial(raw_trials(1)[0], PreprocessConfig(baseline="fixation"))
    assert out.shape == (27, 2000)
    assert np.abs(out.astype(np.float64).mean(axis=0)).max() <= 1e-6
