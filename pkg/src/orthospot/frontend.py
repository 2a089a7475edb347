"""MFCC features: pre-emphasis, 20 ms Hamming frames at a 10 ms hop, 40 mel
filters, log, orthonormal DCT-II."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import ShapeError


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_ms: float = 20.0
    stride_ms: float = 10.0
    preemphasis: float = 0.97
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def stride_samples(self) -> int:
        return int(round(self.sample_rate * self.stride_ms / 1000.0))


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    frame_length_ms: float
    frame_stride_ms: float
    sample_rate: int

    @property
    def shape(self) -> tuple:
        return self.frames.shape


def num_frames(num_samples: int, window: int, stride: int) -> int:
    if num_samples < window:
        return 0
    return (num_samples - window) // stride + 1


def _samples_of(clip) -> tuple[np.ndarray, int]:
    if hasattr(clip, "samples"):
        return np.asarray(clip.samples, dtype=np.float64), int(clip.sample_rate)
    return np.asarray(clip, dtype=np.float64), None


def frame_signal(clip, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Cut a clip (or a bare sample array) into Hamming-weighted windows.

    Returns an array of shape (T, window) with no padding at either end.
    """
    samples, rate = _samples_of(clip)
    if rate is not None and rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {rate} Hz")
    return _frames(samples, config)


def _frames(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    window, stride = config.window_samples, config.stride_samples
    n = num_frames(samples.shape[0], window, stride)
    if n == 0:
        raise ShapeError(f"clip of {samples.shape[0]} samples is shorter than one {window}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(samples, window)[::stride][:n]
    return frames * np.hamming(window)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale, evaluated at the FFT bin centres.

    Shape (n_mels, n_fft // 2 + 1). Filters peak at 1.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def mfcc(clip, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Compute the (T, n_ceps) MFCC matrix of a clip or bare sample array."""
    samples, rate = _samples_of(clip)
    if rate is not None and rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {rate} Hz")
    emphasized = np.append(samples[:1], samples[1:] - config.preemphasis * samples[:-1])
    frames = _frames(emphasized, config)
    power = np.abs(np.fft.rfft(frames, config.n_fft)) ** 2 / config.n_fft
    bank = mel_filterbank(config.n_mels, config.n_fft, config.sample_rate, config.fmin, config.fmax)
    log_mel = np.log(np.maximum(power @ bank.T, config.log_floor))
    ceps = dct(log_mel, type=2, axis=1, norm="ortho")[:, :config.n_ceps]
    return FeatureMatrix(ceps, config.frame_ms, config.stride_ms, config.sample_rate)


def write_feature_dump(path, frames: np.ndarray) -> None:
    """Binary dump: u32 T, u32 D, then T*D little-endian float32 values."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ShapeError(f"feature dump needs a (T, D) matrix, got shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *frames.shape))
        fh.write(frames.astype("<f4").tobytes())


def read_feature_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    n_time, dim = struct.unpack_from("<II", data)
    body = np.frombuffer(data, dtype="<f4", offset=8)
    if body.size != n_time * dim:
        raise ValueError(f"feature dump {path}: header says {n_time}x{dim}, payload has {body.size} values")
    return body.reshape(n_time, dim)
