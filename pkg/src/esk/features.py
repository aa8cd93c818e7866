"""MFCC and log mel-filterbank extraction.

Pipeline: pre-emphasis, framing (trailing partial frame dropped),
symmetric Hamming window, magnitude-squared spectrum over an n_fft
transform, triangular mel filterbank (peak 1.0), natural log with an
absolute floor, and for MFCC an orthonormal DCT-II keeping the first
n_mfcc coefficients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from esk.dataset_io import AudioClip

KIND_CODES = {"mfcc": 0, "logfbank": 1}
_CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

FEATURE_MAGIC = b"ESKF"


@dataclass(frozen=True)
class FeatureConfig:
    win_len_s: float = 0.025
    step_s: float = 0.01
    window: str = "hamming"
    n_mels: int = 256
    fmin_hz: float = 50.0
    fmax_hz: float = 8000.0
    preemph: float = 0.97
    n_fft: int = 512
    n_mfcc: int = 40
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if not 0 < self.fmin_hz < self.fmax_hz:
            raise ValueError(f"need 0 < fmin ({self.fmin_hz}) < fmax ({self.fmax_hz})")
        if self.fmax_hz > sample_rate / 2:
            raise ValueError(
                f"fmax {self.fmax_hz} Hz exceeds Nyquist {sample_rate / 2} Hz"
            )
        if self.n_fft < self.win_len_samples(sample_rate):
            raise ValueError(
                f"n_fft {self.n_fft} shorter than window "
                f"({self.win_len_samples(sample_rate)} samples)"
            )
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc {self.n_mfcc} exceeds n_mels {self.n_mels}")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    def win_len_samples(self, sample_rate: int) -> int:
        return int(round(self.win_len_s * sample_rate))

    def step_samples(self, sample_rate: int) -> int:
        return int(round(self.step_s * sample_rate))


@dataclass
class FeatureMatrix:
    """T x D matrix of frame features, kind 'mfcc' or 'logfbank'."""

    values: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("feature matrix must be 2-D with at least one frame")
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[1]


def pre_emphasize(signal: np.ndarray, alpha: float = 0.97) -> np.ndarray:
    """y[0] = x[0]; y[n] = x[n] - alpha * x[n-1]."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal must be nonempty")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_grid_hz(n_mels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """The (n_mels + 2)-point grid of filter edge/center frequencies in Hz."""
    mels = np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2)
    return np.asarray(mel_to_hz(mels))


def triangle_weights(grid_hz: np.ndarray, freqs_hz: np.ndarray) -> np.ndarray:
    """Evaluate each triangular filter at the given frequencies.

    Filter i rises linearly from grid[i] to 1.0 at grid[i+1] and falls back
    to zero at grid[i+2]. Returns shape (n_filters, len(freqs)).
    """
    n_filters = grid_hz.size - 2
    f = np.asarray(freqs_hz, dtype=np.float64)[None, :]
    lo = grid_hz[:-2, None]
    center = grid_hz[1:-1, None]
    hi = grid_hz[2:, None]
    rising = (f - lo) / (center - lo)
    falling = (hi - f) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling)).reshape(n_filters, -1)


def mel_filterbank(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank sampled at FFT bin frequencies.

    Shape (n_mels, n_fft // 2 + 1); each triangle peaks at 1.0 at its
    center frequency.
    """
    cfg.validate(sample_rate)
    bin_freqs = np.arange(cfg.n_fft // 2 + 1) * (sample_rate / cfg.n_fft)
    return triangle_weights(mel_grid_hz(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz), bin_freqs)


def frame_signal(signal: np.ndarray, win_len: int, step: int) -> np.ndarray:
    """Slice into overlapping frames, dropping any trailing partial frame."""
    if signal.size < win_len:
        raise ValueError(f"signal of {signal.size} samples shorter than window {win_len}")
    n_frames = 1 + (signal.size - win_len) // step
    idx = np.arange(win_len)[None, :] + step * np.arange(n_frames)[:, None]
    return signal[idx]


def hamming_window(n: int) -> np.ndarray:
    # symmetric form, denominator N-1
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """Magnitude-squared spectrum per frame (zero-padded to n_fft)."""
    spectrum = np.fft.rfft(frames, n=n_fft, axis=-1)
    return (spectrum.real * spectrum.real) + (spectrum.imag * spectrum.imag)


def logfbank(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Log mel-filterbank energies, shape T x n_mels."""
    cfg.validate(clip.sample_rate)
    win_len = cfg.win_len_samples(clip.sample_rate)
    step = cfg.step_samples(clip.sample_rate)
    emphasized = pre_emphasize(clip.samples, cfg.preemph)
    frames = frame_signal(emphasized, win_len, step) * hamming_window(win_len)
    power = power_spectrum(frames, cfg.n_fft)
    energies = power @ mel_filterbank(cfg, clip.sample_rate).T
    return FeatureMatrix(np.log(np.maximum(energies, cfg.log_floor)), "logfbank")


def mfcc(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """MFCCs: orthonormal DCT-II of each logfbank row, first n_mfcc kept."""
    fbank = logfbank(clip, cfg)
    coeffs = dct(fbank.values, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return FeatureMatrix(coeffs, "mfcc")


def extract(clip: AudioClip, kind: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    if kind == "mfcc":
        return mfcc(clip, cfg)
    if kind == "logfbank":
        return logfbank(clip, cfg)
    raise ValueError(f"unknown feature kind {kind!r}")


def save_features(path: str | Path, features: FeatureMatrix) -> None:
    """Binary feature file: magic ESKF, u32 T, u32 D, u8 kind, f32le data."""
    t, d = features.values.shape
    header = FEATURE_MAGIC + struct.pack("<IIB", t, d, KIND_CODES[features.kind])
    body = features.values.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_features(path: str | Path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    t, d, code = struct.unpack_from("<IIB", data, 4)
    if code not in _CODE_KINDS:
        raise ValueError(f"{path}: unknown feature kind code {code}")
    expected = 13 + 4 * t * d
    if len(data) < expected:
        raise ValueError(f"{path}: truncated ({len(data)} bytes, expected {expected})")
    values = np.frombuffer(data, dtype="<f4", count=t * d, offset=13).reshape(t, d)
    return FeatureMatrix(values.astype(np.float64), _CODE_KINDS[code])
