"""Energy-based voice activity detection with hangover smoothing.

Frames are voiced when their RMS energy clears a mode-dependent multiple
of a robust noise floor (10th percentile of frame RMS, floored at 1e-5)
and their zero-crossing rate stays below a cap. Decisions are invariant
to positive gain because energy and the noise floor scale together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from esk.dataset_io import AudioClip

SUPPORTED_RATES = (8000, 16000, 32000, 48000)

# Energy multiplier per aggressiveness mode; higher mode rejects more.
MODE_THRESHOLDS = (1.5, 2.0, 3.0, 4.5)

NOISE_FLOOR_MIN = 1e-5


@dataclass(frozen=True)
class VadConfig:
    mode: int = 2
    frame_ms: int = 30
    hangover_frames: int = 2
    zcr_max: float = 0.35
    thresholds: tuple[float, float, float, float] = MODE_THRESHOLDS

    def __post_init__(self) -> None:
        if self.mode not in (0, 1, 2, 3):
            raise ValueError(f"mode must be in 0..3, got {self.mode}")
        if self.frame_ms not in (10, 20, 30):
            raise ValueError(f"frame_ms must be 10, 20 or 30, got {self.frame_ms}")
        if self.hangover_frames < 0:
            raise ValueError("hangover_frames must be nonnegative")


@dataclass
class FrameDecisions:
    """Per-frame voiced flags for non-overlapping analysis frames."""

    flags: np.ndarray
    frame_len_samples: int

    def __post_init__(self) -> None:
        self.flags = np.asarray(self.flags, dtype=bool)


def classify_frames(clip: AudioClip, cfg: VadConfig = VadConfig()) -> FrameDecisions:
    """Classify each non-overlapping frame of the clip as voiced/unvoiced.

    Frame k is voiced iff rms_k > threshold(mode) * noise_floor and its
    zero-crossing rate (fraction of adjacent sign changes, 1.0 at Nyquist)
    is below cfg.zcr_max.
    """
    if clip.sample_rate not in SUPPORTED_RATES:
        raise ValueError(
            f"unsupported sample rate {clip.sample_rate}; expected one of {SUPPORTED_RATES}"
        )
    frame_len = clip.sample_rate * cfg.frame_ms // 1000
    n_frames = clip.samples.size // frame_len
    if n_frames < 1:
        raise ValueError(
            f"clip of {clip.samples.size} samples is shorter than one {frame_len}-sample frame"
        )
    frames = clip.samples[: n_frames * frame_len].reshape(n_frames, frame_len)

    rms = np.sqrt(np.mean(frames * frames, axis=1))
    noise_floor = max(float(np.percentile(rms, 10)), NOISE_FLOOR_MIN)
    threshold = cfg.thresholds[cfg.mode] * noise_floor

    sign = np.signbit(frames)
    zcr = np.count_nonzero(sign[:, 1:] != sign[:, :-1], axis=1) / (frame_len - 1)

    flags = (rms > threshold) & (zcr < cfg.zcr_max)
    return FrameDecisions(flags, frame_len)


def filter_voiced(
    clip: AudioClip, decisions: FrameDecisions, hangover_frames: int = 2
) -> AudioClip:
    """Keep voiced frames plus a short hangover after each voiced run.

    Kept frames are concatenated in order. If nothing is voiced the
    original clip is returned unchanged (fail-open: an all-silent
    utterance still carries information downstream).
    """
    frame_len = decisions.frame_len_samples
    n_frames = clip.samples.size // frame_len
    if decisions.flags.size != n_frames:
        raise ValueError(
            f"decisions cover {decisions.flags.size} frames but clip has {n_frames}"
        )
    if not decisions.flags.any():
        return clip

    kept = []
    since_voiced = hangover_frames + 1
    for i, voiced in enumerate(decisions.flags):
        since_voiced = 0 if voiced else since_voiced + 1
        if voiced or since_voiced <= hangover_frames:
            kept.append(i)

    frames = clip.samples[: n_frames * frame_len].reshape(n_frames, frame_len)
    return AudioClip(frames[kept].reshape(-1), clip.sample_rate)
