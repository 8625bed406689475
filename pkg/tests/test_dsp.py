import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosstalk_mtl.dsp import (
    StftConfig,
    fit_standardizer,
    log_power,
    log_standardize,
    read_spectrogram,
    stft_power,
    write_spectrogram,
)
from crosstalk_mtl.errors import ConfigError, FormatError, LengthError, StateError

from oracles import dft_power

RECT = StftConfig(n_fft=64, hop=32, window="rectangular", sample_rate=1000.0)


def one_sided_energy(power, n):
    w = np.full(power.shape[-2], 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return (power * w[:, None]).sum(axis=-2)


def test_config_invariants():
    assert StftConfig().n_bins == 129
    assert StftConfig(n_fft=64, hop=32).n_bins == 33
    with pytest.raises(ConfigError):
        StftConfig(n_fft=64, hop=65)
    with pytest.raises(ConfigError):
        StftConfig(n_fft=64, hop=0)
    with pytest.raises(ConfigError):
        StftConfig(window="kaiser")


def test_single_frame_when_length_equals_window(rng):
    for hop in (1, 17, 64):
        cfg = StftConfig(n_fft=64, hop=hop)
        assert stft_power(rng.standard_normal(64), cfg).shape == (1, 33, 1)


@settings(max_examples=60, deadline=None)
@given(n_fft=st.sampled_from([8, 16, 30, 64]), hop_frac=st.floats(0.05, 1.0), extra=st.integers(0, 300))
def test_frame_count_formula(n_fft, hop_frac, extra):
    hop = max(1, int(n_fft * hop_frac))
    cfg = StftConfig(n_fft=n_fft, hop=hop)
    L = n_fft + extra
    spec = stft_power(np.zeros((2, L)), cfg)
    assert spec.shape == (2, n_fft // 2 + 1, 1 + (L - n_fft) // hop)


def test_short_signal_raises():
    with pytest.raises(LengthError):
        stft_power(np.zeros(63), RECT)


def test_constant_signal_is_dc_only():
    p = stft_power(np.full(256, 0.7), RECT)
    assert (p[:, 1:, :] <= 1e-10 * p[:, :1, :]).all()


@pytest.mark.parametrize("k", [1, 5, 13, 32])
def test_bin_centred_sine_matches_naive_dft(k):
    n, fs = 64, 1000.0
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * (k * fs / n) * t + 0.3)
    got = stft_power(x, RECT)[0, :, 0]
    ref = dft_power(x)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9 * ref.max())
    assert got.argmax() == k
    others = np.delete(got, k)
    assert others.max() <= 1e-10 * got[k]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.sampled_from([16, 31, 64, 100]), scale=st.floats(1e-3, 1e3))
def test_parseval_per_frame(seed, n, scale):
    x = np.random.default_rng(seed).standard_normal(3 * n) * scale
    cfg = StftConfig(n_fft=n, hop=n, window="rectangular")
    p = stft_power(x, cfg)[0]
    frames = x[: 3 * n].reshape(3, n)
    lhs = one_sided_energy(p, n)
    rhs = n * (frames ** 2).sum(axis=1)  # N times the frame energy, i.e. N^2 times its mean square
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_shift_by_hop_shifts_frames(rng):
    cfg = StftConfig(n_fft=32, hop=8)
    x = rng.standard_normal(200)
    a = stft_power(x, cfg)
    b = stft_power(np.concatenate([np.zeros(8), x]), cfg)
    assert np.array_equal(b[..., 1:], a)


def test_deterministic_and_finite(rng):
    x = rng.standard_normal((2, 500)) * 1e150
    a, b = stft_power(x, StftConfig(64, 16)), stft_power(x, StftConfig(64, 16))
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(log_power(stft_power(np.zeros(100), RECT), RECT)).all()


def test_hann_window_is_periodic():
    from crosstalk_mtl.dsp import window

    w = window("hann", 8)
    assert w[0] == 0 and w[4] == pytest.approx(1.0)
    assert np.array_equal(window("rectangular", 5), np.ones(5))


# ---------------------------------------------------------------- standardization

def test_unfitted_raises(rng):
    with pytest.raises(StateError):
        log_standardize(np.ones((1, 33, 4)), RECT)


def test_profile_maps_to_zero(rng):
    profile = np.exp(rng.standard_normal(33))
    spec = np.tile(profile[None, :, None], (1, 1, 5))
    cfg = fit_standardizer([spec * np.exp(0.1), spec * np.exp(-0.1)], RECT)
    np.testing.assert_allclose(log_standardize(spec, cfg), 0.0, atol=1e-9)


def test_doubling_shifts_by_ln2_over_std(rng):
    specs = [np.exp(rng.standard_normal((1, 33, 6))) for _ in range(4)]
    cfg = fit_standardizer(specs, RECT)
    cfg = cfg.with_stats(cfg.mean, cfg.std)
    s = specs[0]
    # eps is tiny next to these powers; the shift is ln 2 / std per bin
    diff = log_standardize(2 * s, cfg) - log_standardize(s, cfg)
    np.testing.assert_allclose(diff, np.broadcast_to(math.log(2) / cfg.std[0][:, None], diff.shape), rtol=1e-8)


def test_identity_statistics(rng):
    s = np.abs(rng.standard_normal((2, 33, 3)))
    cfg = RECT.with_stats(np.zeros(33), np.ones(33))
    np.testing.assert_array_equal(log_standardize(s, cfg), np.log(s + RECT.log_eps))


def test_std_floor():
    cfg = RECT.with_stats(np.zeros(3), np.zeros(3))
    assert (cfg.std >= 1e-8).all()


def test_fit_needs_data():
    with pytest.raises(StateError):
        fit_standardizer([], RECT)


def test_key_changes_with_parameters():
    assert StftConfig(64, 32).key() != StftConfig(64, 16).key()
    assert StftConfig(64, 32).key() == StftConfig(64, 32).key()


# ---------------------------------------------------------------- SPG1

def test_spectrogram_file_round_trip(tmp_path, rng):
    s = rng.standard_normal((2, 5, 7)).astype(np.float32)
    write_spectrogram(tmp_path / "a.spg", s)
    raw = (tmp_path / "a.spg").read_bytes()
    assert raw[:4] == b"SPG1" and len(raw) == 16 + 4 * s.size
    assert np.array_equal(read_spectrogram(tmp_path / "a.spg"), s)
    (tmp_path / "b.spg").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_spectrogram(tmp_path / "b.spg")
