from __future__ import annotations

import numpy as np
import pytest

from esk.dataset_io import AudioClip


@pytest.fixture
def tone_after_silence() -> AudioClip:
    """0.5 s of silence followed by 0.5 s of a 1 kHz tone at amplitude 0.5."""
    sr = 16000
    t = np.arange(sr // 2) / sr
    tone = 0.5 * np.sin(2.0 * np.pi * 1000.0 * t)
    return AudioClip(np.concatenate([np.zeros(sr // 2), tone]), sr)


def brute_force_dft(x: np.ndarray) -> np.ndarray:
    """O(N^2) DFT of a real signal; returns the one-sided spectrum."""
    n = x.size
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return basis @ x
