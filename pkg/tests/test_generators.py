import numpy as np
import pytest
from scipy import signal as sps
from scipy.io import wavfile

from crosstalk_mtl.dsp import StftConfig, stft_power
from crosstalk_mtl.errors import FormatError, LabelError
from crosstalk_mtl.generators import (
    DRONE_DIRECTIONS,
    DRONE_FAULTS,
    DRONE_TYPES,
    MOTOR_COMPONENTS,
    DroneLabel,
    MotorLabel,
    drone_rotor_frequencies,
    generate_drone,
    generate_motor,
    motor_base_shaft_hz,
    read_signal,
    write_signal,
)

from oracles import band_power_db

HIGH_SNR = (40.0, 40.0)


def band(x, fs, centre, rel=0.02):
    return band_power_db(x, fs, centre * (1 - rel), centre * (1 + rel))


def nearest_centroid_accuracy(X, y, n_classes):
    """Fit on alternate blocks of ``n_classes`` samples, score on the rest."""
    X, y = np.asarray(X), np.asarray(y)
    train = (np.arange(len(y)) // n_classes) % 2 == 0
    classes = np.unique(y)
    centres = np.array([X[train & (y == c)].mean(0) for c in classes])
    d = ((X[~train][:, None, :] - centres[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(1)] == y[~train]))


def best_threshold_accuracy(feature, y):
    order = np.argsort(feature)
    ys = np.asarray(y)[order]
    n = len(ys)
    below = np.concatenate([[0], np.cumsum(ys)])
    k = np.arange(n + 1)
    acc = ((k - below) + (ys.sum() - below)) / n
    return max(acc.max(), (1 - acc).max())


# ---------------------------------------------------------------- labels

def test_label_validation():
    with pytest.raises(LabelError):
        DroneLabel("bent", "A", "fwd")
    with pytest.raises(LabelError):
        DroneLabel("normal", "D", "fwd")
    with pytest.raises(LabelError):
        DroneLabel("normal", "A", "up")
    with pytest.raises(LabelError):
        MotorLabel(irf=0.1)
    with pytest.raises(LabelError):
        MotorLabel(unbalance=12.0)
    with pytest.raises(LabelError):
        MotorLabel(rpm_profile="square")
    with pytest.raises(LabelError):
        generate_motor(DroneLabel("normal", "A", "fwd"), 2048, 256, 0, 0)
    with pytest.raises(LabelError):
        generate_drone(MotorLabel(), 2048, 256, 0, 0)


def test_compound_index_range_and_round_trip():
    seen = set()
    for i in range(2):
        for o in range(2):
            for m in range(3):
                for u in range(3):
                    lab = MotorLabel.from_indices((i, o, m, u))
                    assert lab.indices == (i, o, m, u)
                    seen.add(lab.compound_index)
    assert seen == set(range(36))


# ---------------------------------------------------------------- determinism, normalisation

def test_same_inputs_identical_waveform():
    d = DroneLabel("cut2", "B", "cw")
    assert generate_drone(d, 4096, 2000, 3, 7).tobytes() == generate_drone(d, 4096, 2000, 3, 7).tobytes()
    assert generate_drone(d, 4096, 2000, 3, 7).tobytes() != generate_drone(d, 4096, 2000, 3, 8).tobytes()
    m = MotorLabel(0.2, 0.0, 0.15, 10.0, "sinusoidal")
    assert generate_motor(m, 4096, 2000, 3, 7).tobytes() == generate_motor(m, 4096, 2000, 3, 7).tobytes()


def test_shapes():
    assert generate_drone(DroneLabel("normal", "A", "fwd"), 2048, 300, 0, 0).shape == (1, 300)
    assert generate_motor(MotorLabel(), 2048, 300, 0, 0).shape == (2, 300)


def test_rms_is_normalised_per_sample_and_channel():
    rng = np.random.default_rng(0)
    for i in range(12):
        lab = MotorLabel.from_indices((rng.integers(2), rng.integers(2), rng.integers(3), rng.integers(3)))
        x = generate_motor(lab, 4096, 3000, 1, i)
        np.testing.assert_allclose(np.sqrt((x.astype(float) ** 2).mean(axis=1)), 1.0, rtol=1e-9)
        d = DroneLabel(DRONE_FAULTS[i % 9], DRONE_TYPES[i % 3], DRONE_DIRECTIONS[i % 6])
        assert np.sqrt((generate_drone(d, 4096, 3000, 1, i) ** 2).mean()) == pytest.approx(1.0, rel=1e-9)


# ---------------------------------------------------------------- drone spectra

@pytest.mark.parametrize("drone_type", DRONE_TYPES)
@pytest.mark.parametrize("direction", ["fwd", "left", "cw"])
def test_drone_harmonic_structure(drone_type, direction):
    # rotors spread a few percent around f0, so each rotor's own harmonic is
    # measured and compared with the empty half-order gaps of the series
    fs, n = 16000, 16000
    for idx in range(3):
        lab = DroneLabel("normal", drone_type, direction)
        x = generate_drone(lab, fs, n, 2, idx, snr_db=(30, 30))[0]
        rotors = drone_rotor_frequencies(lab, 2, idx)
        f0 = float(np.mean(rotors))
        for h in (1, 2, 3, 4):
            on = max(band(x, fs, h * fr) for fr in rotors)
            off = max(band(x, fs, (h - 0.5) * f0), band(x, fs, (h + 0.5) * f0))
            assert on - off >= 10.0, (idx, h, on - off)


@pytest.mark.parametrize("loc", [1, 2, 3, 4])
def test_prop_cut_raises_half_order_band(loc):
    fs, n = 16000, 16000
    for idx in range(3):
        normal = DroneLabel("normal", "A", "fwd")
        cut = DroneLabel(f"cut{loc}", "A", "fwd")
        f0 = float(np.mean(drone_rotor_frequencies(normal, 4, idx)))
        a = band_power_db(generate_drone(normal, fs, n, 4, idx)[0], fs, 0.45 * f0, 0.55 * f0)
        b = band_power_db(generate_drone(cut, fs, n, 4, idx)[0], fs, 0.45 * f0, 0.55 * f0)
        assert b - a >= 6.0


def test_drone_types_differ_strongly_directions_slightly():
    fs, n = 8192, 8192

    def spec(lab):
        x = generate_drone(lab, fs, n, 0, 0, snr_db=HIGH_SNR)[0]
        p = np.abs(np.fft.rfft(x * np.hanning(n))) ** 2
        return np.log10(np.array([b.mean() for b in np.array_split(p, 64)]) + 1e-12)

    a = spec(DroneLabel("normal", "A", "fwd"))
    b = spec(DroneLabel("normal", "B", "fwd"))
    c = spec(DroneLabel("normal", "A", "back"))
    assert np.abs(a - b).mean() > 2 * np.abs(a - c).mean()


# ---------------------------------------------------------------- motor spectra

def test_motor_healthy_bearing_bands_sit_at_noise_floor():
    # a +-2 % band holds ~10 correlated bins, so single draws scatter by a few dB;
    # the ratio is averaged over samples before comparing with the 3 dB bound
    fs, n = 8000, 8000
    for seed in range(3):
        ratios = {5.4: [], 3.6: []}
        for idx in range(8):
            shaft = motor_base_shaft_hz(seed, idx)
            x = generate_motor(MotorLabel(), fs, n, seed, idx)[0]
            floor = band_power_db(x, fs, 600, 3800)
            for r in ratios:
                ratios[r].append(10 ** ((band(x, fs, r * shaft) - floor) / 10))
        for r, v in ratios.items():
            assert abs(10 * np.log10(np.mean(v))) <= 3.0, (seed, r)


def test_motor_healthy_shaft_tone_present():
    fs, n = 8000, 8000
    shaft = motor_base_shaft_hz(0, 0)
    x = generate_motor(MotorLabel(), fs, n, 0, 0)[0]
    assert band(x, fs, shaft) - band_power_db(x, fs, 600, 3800) > 20


def test_irf_raises_bpfi_band():
    fs, n = 8000, 8000
    for idx in range(6):
        shaft = motor_base_shaft_hz(1, idx)
        a = band(generate_motor(MotorLabel(), fs, n, 1, idx)[0], fs, 5.4 * shaft)
        b = band(generate_motor(MotorLabel(irf=0.2), fs, n, 1, idx)[0], fs, 5.4 * shaft)
        assert b - a >= 6.0


def test_orf_raises_bpfo_band():
    fs, n = 8000, 8000
    for idx in range(6):
        shaft = motor_base_shaft_hz(1, idx)
        a = band(generate_motor(MotorLabel(), fs, n, 1, idx)[0], fs, 3.6 * shaft)
        b = band(generate_motor(MotorLabel(orf=0.2), fs, n, 1, idx)[0], fs, 3.6 * shaft)
        assert b - a >= 6.0


def test_rpm_profile_moves_shaft_tone():
    fs, n = 4096, 4 * 4096
    shaft = motor_base_shaft_hz(0, 1)
    lab = dict(unbalance=18.0)
    const = generate_motor(MotorLabel(**lab), fs, n, 0, 1)[0]
    sine = generate_motor(MotorLabel(**lab, rpm_profile="sinusoidal"), fs, n, 0, 1)[0]
    # a swept tone spreads its energy out of the narrow band at the nominal speed
    assert band(const, fs, shaft, 0.005) - band(sine, fs, shaft, 0.005) > 6


def test_sensor_b_is_filtered_view_of_same_events():
    fs, n = 8000, 16000
    x = generate_motor(MotorLabel(irf=0.2, orf=0.2), fs, n, 2, 0, snr_db=(30, 30))
    a, b = x[0].astype(float), x[1].astype(float)
    assert not np.allclose(a, b)
    # transfer path is not flat: |Sab|/Saa varies strongly across frequency
    f, saa = sps.welch(a, fs, nperseg=512)
    _, sab = sps.csd(a, b, fs, nperseg=512)
    gain_db = 20 * np.log10(np.abs(sab[1:-1]) / saa[1:-1])
    assert gain_db.max() - gain_db.min() > 6
    # shared event times: impulse envelopes line up near zero lag
    lo, hi = sps.butter(4, [250, 1500], btype="band", fs=fs)
    ea = np.abs(sps.hilbert(sps.filtfilt(lo, hi, a)))
    eb = np.abs(sps.hilbert(sps.filtfilt(lo, hi, b)))
    ea, eb = ea - ea.mean(), eb - eb.mean()
    xc = sps.correlate(eb, ea, mode="full") / (np.linalg.norm(ea) * np.linalg.norm(eb))
    lags = sps.correlation_lags(len(eb), len(ea))
    assert abs(lags[xc.argmax()]) <= fs * 0.002
    assert xc.max() > 0.5


# ---------------------------------------------------------------- learnability and coupling

def _log_bands(x, n_bands):
    p = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    return np.log(np.array([b.mean() for b in np.array_split(p[1:], n_bands)]) + 1e-12)


@pytest.mark.parametrize("comp", MOTOR_COMPONENTS)
def test_motor_component_separable_at_high_snr(comp):
    fs, n = 4096, 4096
    levels = 2 if comp in ("irf", "orf") else 3
    j = MOTOR_COMPONENTS.index(comp)
    X, y = [], []
    for i in range(40 * levels):
        idx = [0, 0, 0, 0]
        idx[j] = i % levels
        x = generate_motor(MotorLabel.from_indices(idx), fs, n, 1, i, snr_db=HIGH_SNR)[0]
        X.append(_log_bands(x, 128))
        y.append(i % levels)
    assert nearest_centroid_accuracy(X, y, levels) > 0.9


@pytest.mark.parametrize("task", ["drone_type", "direction"])
def test_drone_aux_separable_at_high_snr(task):
    fs, n = 4096, 4096
    vals = DRONE_TYPES if task == "drone_type" else DRONE_DIRECTIONS
    X, y = [], []
    for i in range(30 * len(vals)):
        kw = dict(fault="normal", drone_type="A", direction="fwd")
        kw[task] = vals[i % len(vals)]
        X.append(_log_bands(generate_drone(DroneLabel(**kw), fs, n, 1, i, snr_db=HIGH_SNR)[0], 512))
        y.append(i % len(vals))
    assert nearest_centroid_accuracy(X, y, len(vals)) > 0.9


def test_drone_fault_separable_at_high_snr():
    # the oracle knows each rotor's frequency and reads power at its half and whole orders
    fs, n = 4096, 4096
    f = np.fft.rfftfreq(n, 1 / fs)
    X, y = [], []
    for i in range(40 * 9):
        lab = DroneLabel(DRONE_FAULTS[i % 9], "A", "fwd")
        x = generate_drone(lab, fs, n, 1, i, snr_db=HIGH_SNR)[0]
        p = np.abs(np.fft.rfft(x * np.hanning(n))) ** 2
        feats = []
        for fr in drone_rotor_frequencies(lab, 1, i):
            for h in np.arange(0.5, 6.01, 0.5):
                sel = np.abs(f - h * fr) <= 0.01 * h * fr + 1.5
                feats.append(np.log(p[sel].mean() + 1e-12))
        X.append(feats)
        y.append(i % 9)
    assert nearest_centroid_accuracy(X, y, 9) > 0.9


def test_irf_single_band_detector_degrades_under_coupling():
    # bands are the bins of the motor front end the models see
    fs, n = 2048, 1024
    cfg = StftConfig(n_fft=64, hop=64, sample_rate=fs)
    rng = np.random.default_rng(0)
    best = {}
    for mode in ("zero", "random"):
        F, y = [], []
        for i in range(300):
            irf = i % 2
            if mode == "zero":
                idx = (irf, 0, 0, 0)
            else:
                idx = (irf, rng.integers(2), rng.integers(3), rng.integers(3))
            x = generate_motor(MotorLabel.from_indices(idx), fs, n, 7, i)[0]
            F.append(np.log(stft_power(x, cfg)[0].mean(-1) + 1e-12))
            y.append(irf)
        F = np.array(F)
        best[mode] = max(best_threshold_accuracy(F[:, k], y) for k in range(F.shape[1]))
    assert best["zero"] > 0.95
    assert best["zero"] - best["random"] >= 0.05


# ---------------------------------------------------------------- containers

def test_sigf_round_trip(tmp_path, rng):
    data = rng.standard_normal((2, 123)).astype(np.float32)
    write_signal(tmp_path / "x.sigf", data, 2048.0)
    raw = (tmp_path / "x.sigf").read_bytes()
    assert raw[:4] == b"SIG1" and len(raw) == 20 + 4 * data.size
    back, rate = read_signal(tmp_path / "x.sigf")
    assert rate == 2048.0 and np.array_equal(back, data)
    # interleaved frames: second value on disk is channel 1 at t=0
    assert np.frombuffer(raw[20:28], "<f4")[1] == data[1, 0]


def test_sigf_corruption(tmp_path):
    write_signal(tmp_path / "x.sigf", np.zeros((1, 10)), 100.0)
    raw = (tmp_path / "x.sigf").read_bytes()
    (tmp_path / "short.sigf").write_bytes(raw[:-2])
    (tmp_path / "magic.sigf").write_bytes(b"SIGX" + raw[4:])
    for name in ("short.sigf", "magic.sigf"):
        with pytest.raises(FormatError):
            read_signal(tmp_path / name)


def test_wav_reading(tmp_path, rng):
    pcm = (rng.standard_normal((50, 2)) * 3000).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 8000, pcm)
    data, rate = read_signal(tmp_path / "a.wav")
    assert rate == 8000 and data.shape == (2, 50)
    np.testing.assert_allclose(data, pcm.T / 32768.0)
    flt = rng.standard_normal(40).astype(np.float32)
    wavfile.write(tmp_path / "b.wav", 16000, flt)
    data, _ = read_signal(tmp_path / "b.wav")
    assert np.array_equal(data[0], flt)
    wavfile.write(tmp_path / "c.wav", 8000, pcm.astype(np.int32))
    with pytest.raises(FormatError):
        read_signal(tmp_path / "c.wav")
