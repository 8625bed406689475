"""Synthetic physically coupled drone and motor signals.

The real recordings are described only qualitatively, so every physical
constant below is a stand-in chosen to reproduce the qualitative effects:

* drone: the airframe type moves the rotor harmonic series a lot, the
  manoeuvre direction nudges individual rotors slightly, a dented motor cap
  modulates one rotor's tone, a cut propeller adds half-order components and
  broadband noise;
* motor: unbalance and misalignment add shaft-order tones, race defects add
  resonance-filtered impulse trains, and active components modulate each
  other so their signatures cannot be told apart by one band alone.

A waveform is a pure function of ``(seed, label, sample_index)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import FormatError, LabelError
from .seeding import derive_rng

DRONE_FAULTS = ("normal", "dent1", "dent2", "dent3", "dent4", "cut1", "cut2", "cut3", "cut4")
DRONE_TYPES = ("A", "B", "C")
DRONE_DIRECTIONS = ("fwd", "back", "left", "right", "cw", "ccw")

MOTOR_LEVELS = {
    "irf": (0.0, 0.2),
    "orf": (0.0, 0.2),
    "misalignment": (0.0, 0.15, 0.3),
    "unbalance": (0.0, 10.0, 18.0),
}
MOTOR_COMPONENTS = tuple(MOTOR_LEVELS)
RPM_PROFILES = ("constant", "sinusoidal", "triangular")

# rotor order: front-left, front-right, rear-left, rear-right
_TILT = {
    "fwd": (1, 1, -1, -1),
    "back": (-1, -1, 1, 1),
    "left": (1, -1, 1, -1),
    "right": (-1, 1, -1, 1),
    "cw": (1, -1, -1, 1),
    "ccw": (-1, 1, 1, -1),
}

CONSTANTS = {
    "drone": {
        "f0": {"A": 150.0, "B": 195.0, "C": 240.0},
        "envelope": {
            "A": (1.0, 0.70, 0.50, 0.36, 0.26, 0.19, 0.14, 0.10),
            "B": (0.60, 1.0, 0.55, 0.45, 0.20, 0.30, 0.10, 0.12),
            "C": (1.0, 0.35, 0.65, 0.25, 0.45, 0.15, 0.30, 0.10),
        },
        "harmonic_phase_step": 0.9,
        "max_harmonic_fraction": 0.45,
        "f0_jitter": 0.01,
        "rotor_offset": (-0.06, -0.02, 0.02, 0.06),
        "direction_freq_tilt": 0.012,
        "direction_gain_tilt": 0.12,
        "dent_depth": (0.45, 0.55, 0.65, 0.75),
        "dent_phase": (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi),
        "cut_subharmonic": 0.45,
        "cut_noise": 0.35,
    },
    "motor": {
        "shaft_hz": (22.0, 32.0),
        "rpm_swing": 0.12,
        "rpm_period_s": 1.3,
        "bpfi_ratio": 5.4,
        "bpfo_ratio": 3.6,
        "baseline_1x": 0.3,
        "unbalance_1x": 1.0,
        "misalignment_2x": 0.8,
        "misalignment_1x": 0.25,
        "misalignment_3x": 0.35,
        "misalignment_high": (0.3, 0.25, 0.2),  # 4x..6x, shares front-end bins with BPFI
        "bearing_gain": 2.5,
        "bearing_tone": 0.15,
        "resonance_hz": 420.0,
        "resonance_shift_hz": 220.0,
        "resonance_decay_s": 0.003,
        "irf_shaft_am": 0.5,
        "unbalance_cross_mod": 0.7,
        "slip": 0.01,
        "sensor_b_direct": 0.5,
        "sensor_b_peak_hz": 300.0,
        "sensor_b_peak_q": 2.5,
        "sensor_b_peak_gain": 1.2,
        "sensor_b_noise_factor": 1.4,
    },
}


@dataclass(frozen=True)
class DroneLabel:
    fault: str
    drone_type: str
    direction: str

    def __post_init__(self):
        if self.fault not in DRONE_FAULTS:
            raise LabelError(f"unknown drone fault {self.fault!r}")
        if self.drone_type not in DRONE_TYPES:
            raise LabelError(f"unknown drone type {self.drone_type!r}")
        if self.direction not in DRONE_DIRECTIONS:
            raise LabelError(f"unknown direction {self.direction!r}")


def _level_index(component: str, value: float) -> int:
    levels = MOTOR_LEVELS[component]
    for i, v in enumerate(levels):
        if abs(float(value) - v) < 1e-9:
            return i
    raise LabelError(f"invalid {component} severity {value!r}; expected one of {levels}")


@dataclass(frozen=True)
class MotorLabel:
    irf: float = 0.0
    orf: float = 0.0
    misalignment: float = 0.0
    unbalance: float = 0.0
    rpm_profile: str = "constant"

    def __post_init__(self):
        for c in MOTOR_COMPONENTS:
            _level_index(c, getattr(self, c))
        if self.rpm_profile not in RPM_PROFILES:
            raise LabelError(f"unknown rpm profile {self.rpm_profile!r}")

    @property
    def indices(self) -> tuple[int, int, int, int]:
        return tuple(_level_index(c, getattr(self, c)) for c in MOTOR_COMPONENTS)

    @property
    def compound_index(self) -> int:
        i, o, m, u = self.indices
        return ((i * 2 + o) * 3 + m) * 3 + u

    @classmethod
    def from_indices(cls, idx, rpm_profile: str = "constant") -> MotorLabel:
        vals = [MOTOR_LEVELS[c][k] for c, k in zip(MOTOR_COMPONENTS, idx)]
        return cls(*vals, rpm_profile=rpm_profile)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _normalize(x: np.ndarray) -> np.ndarray:
    r = _rms(x)
    return x / r if r > 0 else x


# ---------------------------------------------------------------- drone

def _drone_rotors(label: DroneLabel, rng, k) -> list[tuple[float, float]]:
    f0 = k["f0"][label.drone_type] * (1 + k["f0_jitter"] * rng.uniform(-1, 1))
    tilt = _TILT[label.direction]
    return [
        (f0 * (1 + k["rotor_offset"][r] + k["direction_freq_tilt"] * tilt[r]),
         1 + k["direction_gain_tilt"] * tilt[r])
        for r in range(4)
    ]


def drone_rotor_frequencies(label: DroneLabel, seed: int, sample_index: int,
                            constants: dict | None = None) -> list[float]:
    """Blade-pass frequency of each rotor in the waveform of ``generate_drone``."""
    rng = derive_rng(seed, "drone", sample_index)
    return [fr for fr, _ in _drone_rotors(label, rng, constants or CONSTANTS["drone"])]


def generate_drone(label: DroneLabel, sample_rate: float, n_samples: int, seed: int, sample_index: int,
                   snr_db=(5.0, 20.0), constants: dict | None = None) -> np.ndarray:
    """One-channel drone sound, shape [1, n_samples], unit RMS."""
    if not isinstance(label, DroneLabel):
        raise LabelError("generate_drone needs a DroneLabel")
    k = constants or CONSTANTS["drone"]
    rng = derive_rng(seed, "drone", sample_index)
    t = np.arange(n_samples) / sample_rate
    rotors = _drone_rotors(label, rng, k)
    env = np.asarray(k["envelope"][label.drone_type])
    fmax = k["max_harmonic_fraction"] * sample_rate
    fault_rotor = int(label.fault[-1]) - 1 if label.fault != "normal" else -1

    healthy = np.zeros(n_samples)
    extra = np.zeros(n_samples)
    for r, (fr, gain) in enumerate(rotors):
        tau = rng.uniform(0, 1.0)  # rotors are not phase-locked
        tt = t + tau
        rotor = np.zeros(n_samples)
        for h, a in enumerate(env, start=1):
            if h * fr >= fmax:
                break
            rotor += a * np.cos(2 * np.pi * h * fr * tt + k["harmonic_phase_step"] * h * h)
        rotor *= gain
        healthy += rotor
        if r == fault_rotor and label.fault.startswith("dent"):
            loc = fault_rotor
            mod = k["dent_depth"][loc] * np.cos(2 * np.pi * fr * tt + k["dent_phase"][loc])
            extra += rotor * mod
        elif r == fault_rotor and label.fault.startswith("cut"):
            for h, a in enumerate(env, start=1):
                fh = (h - 0.5) * fr
                if fh >= fmax:
                    break
                extra += gain * k["cut_subharmonic"] * a * np.cos(2 * np.pi * fh * tt + rng.uniform(0, 2 * np.pi))
    ref = _rms(healthy)
    if label.fault.startswith("cut"):
        extra += k["cut_noise"] * ref * rng.standard_normal(n_samples)
    snr = rng.uniform(*snr_db)
    noise = ref * 10 ** (-snr / 20) * rng.standard_normal(n_samples)
    return _normalize(healthy + extra + noise)[None, :]


# ---------------------------------------------------------------- motor

def motor_base_shaft_hz(seed: int, sample_index: int, constants: dict | None = None) -> float:
    """Nominal shaft frequency drawn for a motor sample."""
    k = constants or CONSTANTS["motor"]
    return float(derive_rng(seed, "motor", sample_index).uniform(*k["shaft_hz"]))


def shaft_frequency(profile: str, base_hz: float, t: np.ndarray, phase: float, swing: float,
                    period: float) -> np.ndarray:
    if profile == "constant":
        return np.full_like(t, base_hz)
    u = t / period + phase
    if profile == "sinusoidal":
        shape = np.sin(2 * np.pi * u)
    elif profile == "triangular":
        shape = 2 * np.abs(2 * (u - np.floor(u + 0.5))) - 1
    else:
        raise LabelError(f"unknown rpm profile {profile!r}")
    return base_hz * (1 + swing * shape)


def _impulse_train(cycles: np.ndarray, amp: np.ndarray, rng, slip: float) -> np.ndarray:
    """Unit impulses where the cumulative defect phase crosses an integer."""
    jitter = slip * rng.standard_normal(cycles.shape[0])
    c = cycles + np.cumsum(jitter) / max(1, cycles.shape[0]) ** 0.5
    hits = np.flatnonzero(np.diff(np.floor(c)) > 0) + 1
    train = np.zeros_like(cycles)
    train[hits] = amp[hits]
    return train


def generate_motor(label: MotorLabel, sample_rate: float, n_samples: int, seed: int, sample_index: int,
                   snr_db=(5.0, 20.0), constants: dict | None = None, return_clean: bool = False):
    """Two-sensor motor vibration, shape [2, n_samples]; each channel unit RMS.

    Channel 0 is sensor A; channel 1 (sensor B) sees the same mechanical
    events through a fixed resonant transfer path with its own noise.
    """
    if not isinstance(label, MotorLabel):
        raise LabelError("generate_motor needs a MotorLabel")
    k = constants or CONSTANTS["motor"]
    rng = derive_rng(seed, "motor", sample_index)
    fs = sample_rate
    t = np.arange(n_samples) / fs
    base = rng.uniform(*k["shaft_hz"])
    r = shaft_frequency(label.rpm_profile, base, t, rng.uniform(0, 1), k["rpm_swing"], k["rpm_period_s"])
    shaft_cycles = np.cumsum(r) / fs + rng.uniform(0, 1)
    theta = 2 * np.pi * shaft_cycles
    r_ref = np.mean(k["shaft_hz"])

    irf_s = label.irf / MOTOR_LEVELS["irf"][-1]
    orf_s = label.orf / MOTOR_LEVELS["orf"][-1]
    mis_s = label.misalignment / MOTOR_LEVELS["misalignment"][-1]
    unb_s = label.unbalance / MOTOR_LEVELS["unbalance"][-1]

    healthy = k["baseline_1x"] * np.cos(theta)
    x = healthy.copy()
    x += k["unbalance_1x"] * unb_s * (r / r_ref) ** 2 * np.cos(theta + 0.3)
    x += mis_s * (k["misalignment_2x"] * np.cos(2 * theta + 1.1)
                  + k["misalignment_1x"] * np.cos(theta + 2.0)
                  + k["misalignment_3x"] * np.cos(3 * theta + 0.4)
                  + sum(a * np.cos(h * theta + 0.7 * h) for h, a in enumerate(k["misalignment_high"], start=4)))

    # bearing impulses excite a structural resonance; misalignment preload stiffens it
    f_res = k["resonance_hz"] + k["resonance_shift_hz"] * mis_s
    kt = np.arange(int(6 * k["resonance_decay_s"] * fs) + 1) / fs
    kernel = np.exp(-kt / k["resonance_decay_s"]) * np.sin(2 * np.pi * f_res * kt)
    cross = 1 + k["unbalance_cross_mod"] * unb_s * np.cos(theta + np.pi / 3)
    bearing = np.zeros(n_samples)
    if irf_s:
        amp = irf_s * (1 + k["irf_shaft_am"] * np.cos(theta)) * cross
        cyc = k["bpfi_ratio"] * shaft_cycles
        bearing += _impulse_train(cyc, amp, rng, k["slip"])
        x += k["bearing_tone"] * irf_s * cross * np.cos(2 * np.pi * cyc)
    if orf_s:
        amp = orf_s * cross
        cyc = k["bpfo_ratio"] * shaft_cycles + 0.37
        bearing += _impulse_train(cyc, amp, rng, k["slip"])
        x += k["bearing_tone"] * orf_s * cross * np.cos(2 * np.pi * cyc)
    if bearing.any():
        x += k["bearing_gain"] * np.convolve(bearing, kernel)[:n_samples]

    ref = _rms(healthy)
    snr = rng.uniform(*snr_db)
    sigma = ref * 10 ** (-snr / 20)
    a = x + sigma * rng.standard_normal(n_samples)
    b_peak, a_peak = sps.iirpeak(k["sensor_b_peak_hz"], k["sensor_b_peak_q"], fs=fs)
    xb = k["sensor_b_direct"] * x + k["sensor_b_peak_gain"] * sps.lfilter(b_peak, a_peak, x)
    b = xb + k["sensor_b_noise_factor"] * sigma * rng.standard_normal(n_samples)
    out = np.stack([_normalize(a), _normalize(b)])
    if return_clean:
        return out, x
    return out


# ---------------------------------------------------------------- containers

_SIG_MAGIC = b"SIG1"
_SIG_VERSION = 1


def write_signal(path, data: np.ndarray, sample_rate: float) -> None:
    """``.sigf`` container: header then f32 little-endian interleaved frames."""
    data = np.atleast_2d(np.asarray(data))
    C, L = data.shape
    header = _SIG_MAGIC + struct.pack("<HHId", _SIG_VERSION, C, L, float(sample_rate))
    Path(path).write_bytes(header + data.T.astype("<f4").tobytes())


def read_signal(path) -> tuple[np.ndarray, float]:
    """Read ``.sigf`` or PCM WAV (16-bit int or 32-bit float); returns ([C, L], rate)."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        rate, data = wavfile.read(path)
        if data.dtype == np.int16:
            data = data.astype(np.float32) / 32768.0
        elif data.dtype == np.float32:
            data = data.astype(np.float32)
        else:
            raise FormatError(f"{path}: unsupported WAV sample format {data.dtype}")
        data = data.T if data.ndim == 2 else data[None, :]
        return np.ascontiguousarray(data), float(rate)
    buf = path.read_bytes()
    if buf[:4] != _SIG_MAGIC or len(buf) < 20:
        raise FormatError(f"{path}: not a SIG1 signal")
    version, C, L, rate = struct.unpack_from("<HHId", buf, 4)
    if version != _SIG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(buf) != 20 + 4 * C * L:
        raise FormatError(f"{path}: expected {C}x{L} samples")
    frames = np.frombuffer(buf, dtype="<f4", offset=20).reshape(L, C)
    return np.ascontiguousarray(frames.T.astype(np.float32)), rate
