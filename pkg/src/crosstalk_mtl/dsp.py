"""Waveform to log-power spectrogram conditioning."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, LengthError, StateError


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 256
    hop: int = 128
    window: str = "hann"
    sample_rate: float = 16000.0
    log_eps: float = 1e-10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError(f"hop must satisfy 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.std is not None

    def n_frames(self, length: int) -> int:
        return 1 + (length - self.n_fft) // self.hop

    def key(self) -> str:
        """Digest of the parameters that determine the power spectrogram."""
        text = f"{self.n_fft}|{self.hop}|{self.window}|{float(self.sample_rate)!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def with_stats(self, mean: np.ndarray, std: np.ndarray) -> StftConfig:
        return replace(self, mean=np.asarray(mean, dtype=np.float64),
                       std=np.maximum(np.asarray(std, dtype=np.float64), 1e-8))


def window(kind: str, n: int) -> np.ndarray:
    if kind == "rectangular":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(signal, cfg: StftConfig) -> np.ndarray:
    """One-sided power spectrogram ``|DFT(window * frame)|**2``, shape [C, F, T]."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    L = x.shape[-1]
    if L < cfg.n_fft:
        raise LengthError(f"signal of {L} samples is shorter than the {cfg.n_fft}-sample window")
    T = cfg.n_frames(L)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(T)[:, None]
    frames = x[:, idx] * window(cfg.window, cfg.n_fft)
    spec = np.fft.rfft(frames, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    return np.ascontiguousarray(power.transpose(0, 2, 1))


def log_power(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    return np.log(np.asarray(spec, dtype=np.float64) + cfg.log_eps)


def fit_standardizer(specs: Iterable[np.ndarray], cfg: StftConfig) -> StftConfig:
    """Per (channel, bin) mean and std of log power over all frames of ``specs``.

    Pass training-split spectrograms only.
    """
    total = None
    sq = None
    n = 0
    for s in specs:
        lp = log_power(s, cfg)
        if total is None:
            total = np.zeros(lp.shape[:2])
            sq = np.zeros(lp.shape[:2])
        total += lp.sum(axis=-1)
        sq += (lp * lp).sum(axis=-1)
        n += lp.shape[-1]
    if not n:
        raise StateError("no spectrograms to fit standardization statistics on")
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return cfg.with_stats(mean, np.sqrt(var))


def log_standardize(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """``(log(spec + eps) - mean_f) / std_f`` per frequency bin (and channel)."""
    if not cfg.fitted:
        raise StateError("standardization statistics are not fitted")
    spec = np.asarray(spec, dtype=np.float64)
    mean = np.asarray(cfg.mean, dtype=np.float64)
    std = np.asarray(cfg.std, dtype=np.float64)
    C = spec.shape[0]
    if mean.ndim == 1:  # one profile shared by every channel
        mean = np.broadcast_to(mean, (C, mean.shape[0]))
        std = np.broadcast_to(std, (C, std.shape[0]))
    if mean.shape[0] < C:
        raise StateError(f"statistics fitted for {mean.shape[0]} channels, spectrogram has {C}")
    return (log_power(spec, cfg) - mean[:C, :, None]) / std[:C, :, None]


# ---------------------------------------------------------------- SPG1 cache files

_SPG_MAGIC = b"SPG1"


def write_spectrogram(path, spec: np.ndarray) -> None:
    spec = np.asarray(spec)
    if spec.ndim != 3:
        raise FormatError("spectrogram must be [channels, F, T]")
    C, F, T = spec.shape
    path = Path(path)
    # write-then-rename so concurrent readers never see a partial file
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_SPG_MAGIC + struct.pack("<III", C, F, T) + spec.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_spectrogram(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != _SPG_MAGIC or len(buf) < 16:
        raise FormatError(f"{path}: not an SPG1 spectrogram")
    C, F, T = struct.unpack_from("<III", buf, 4)
    n = C * F * T
    if len(buf) != 16 + 4 * n:
        raise FormatError(f"{path}: expected {n} values")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(C, F, T).astype(np.float32)
