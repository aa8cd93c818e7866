from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esk.dataset_io import AudioClip
from esk.vad import MODE_THRESHOLDS, FrameDecisions, VadConfig, classify_frames, filter_voiced


def rms_oracle_flags(samples, sr, mode, frame_ms, zcr_max=0.35):
    """Independent per-frame reimplementation of the stated decision rule."""
    frame_len = sr * frame_ms // 1000
    n = len(samples) // frame_len
    rms, zcr = [], []
    for k in range(n):
        frame = samples[k * frame_len : (k + 1) * frame_len]
        rms.append(np.sqrt(sum(s * s for s in frame) / frame_len))
        crossings = 0
        for a, b in zip(frame[:-1], frame[1:]):
            if np.signbit(a) != np.signbit(b):
                crossings += 1
        zcr.append(crossings / (frame_len - 1))
    floor = max(np.percentile(rms, 10), 1e-5)
    threshold = MODE_THRESHOLDS[mode] * floor
    return [r > threshold and z < zcr_max for r, z in zip(rms, zcr)]


class TestClassifyFrames:
    def test_zero_clip_all_unvoiced(self):
        clip = AudioClip(np.zeros(16000), 16000)
        for mode in range(4):
            decisions = classify_frames(clip, VadConfig(mode=mode))
            assert not decisions.flags.any()

    def test_mode_default_is_two(self):
        assert VadConfig().mode == 2

    def test_tone_after_silence_matches_rms_oracle(self, tone_after_silence):
        cfg = VadConfig(mode=2, frame_ms=30)
        decisions = classify_frames(tone_after_silence, cfg)
        expected = rms_oracle_flags(tone_after_silence.samples, 16000, 2, 30)
        assert decisions.flags.tolist() == expected
        # the voiced region is exactly the frames overlapping the tone
        frame_len = decisions.frame_len_samples
        tone_frames = [i for i in range(decisions.flags.size) if (i + 1) * frame_len > 8000]
        assert [i for i, f in enumerate(decisions.flags) if f] == tone_frames

    def test_gain_invariance(self, tone_after_silence):
        base = classify_frames(tone_after_silence, VadConfig())
        for gain in (0.25, 0.5, 2.0):
            scaled = AudioClip(tone_after_silence.samples * gain, 16000)
            assert np.array_equal(classify_frames(scaled, VadConfig()).flags, base.flags)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.floats(min_value=0.1, max_value=2.0), st.integers(0, 2**31 - 1))
    def test_gain_invariance_property(self, mode, gain, seed):
        rng = np.random.default_rng(seed)
        samples = np.clip(rng.normal(0.0, 0.1, 8000), -0.49, 0.49)
        cfg = VadConfig(mode=mode)
        flags = classify_frames(AudioClip(samples, 16000), cfg).flags
        scaled = classify_frames(AudioClip(samples * gain, 16000), cfg).flags
        assert np.array_equal(flags, scaled)

    def test_mode_monotonicity(self, tone_after_silence):
        voiced_sets = []
        for mode in range(4):
            flags = classify_frames(tone_after_silence, VadConfig(mode=mode)).flags
            voiced_sets.append({i for i, f in enumerate(flags) if f})
        for lower, higher in zip(voiced_sets, voiced_sets[1:]):
            assert higher <= lower

    def test_unsupported_rate(self):
        clip = AudioClip(np.zeros(4410), 44100)
        with pytest.raises(ValueError, match="sample rate"):
            classify_frames(clip, VadConfig())

    def test_too_short(self):
        clip = AudioClip(np.zeros(100), 16000)
        with pytest.raises(ValueError, match="shorter"):
            classify_frames(clip, VadConfig(frame_ms=30))

    def test_bad_config(self):
        with pytest.raises(ValueError, match="mode"):
            VadConfig(mode=4)
        with pytest.raises(ValueError, match="frame_ms"):
            VadConfig(frame_ms=25)


class TestFilterVoiced:
    def _clip(self, n_frames, frame_len=480):
        rng = np.random.default_rng(1)
        return AudioClip(rng.uniform(-0.5, 0.5, n_frames * frame_len), 16000)

    def test_all_voiced_is_identity(self):
        clip = self._clip(6)
        decisions = FrameDecisions(np.ones(6, dtype=bool), 480)
        out = filter_voiced(clip, decisions, 2)
        assert np.array_equal(out.samples, clip.samples)

    def test_hangover_keeps_stated_frames(self):
        clip = self._clip(6)
        decisions = FrameDecisions(np.array([1, 1, 0, 0, 0, 1], dtype=bool), 480)
        out = filter_voiced(clip, decisions, 1)
        frames = clip.samples.reshape(6, 480)
        expected = np.concatenate([frames[i] for i in (0, 1, 2, 5)])
        assert np.array_equal(out.samples, expected)

    def test_fail_open_when_nothing_voiced(self):
        clip = self._clip(4)
        decisions = FrameDecisions(np.zeros(4, dtype=bool), 480)
        out = filter_voiced(clip, decisions, 2)
        assert out is clip

    def test_length_contract(self):
        clip = self._clip(8)
        flags = np.array([0, 1, 1, 0, 0, 0, 1, 0], dtype=bool)
        out = filter_voiced(clip, FrameDecisions(flags, 480), 2)
        # kept: 1, 2 plus hangover 3, 4; 6 plus hangover 7 -> 6 frames
        assert out.samples.size == 6 * 480

    def test_mismatched_decisions(self):
        clip = self._clip(4)
        with pytest.raises(ValueError, match="frames"):
            filter_voiced(clip, FrameDecisions(np.ones(7, dtype=bool), 480), 2)

    def test_leading_silence_gets_no_hangover(self):
        clip = self._clip(4)
        decisions = FrameDecisions(np.array([0, 0, 1, 1], dtype=bool), 480)
        out = filter_voiced(clip, decisions, 2)
        frames = clip.samples.reshape(4, 480)
        assert np.array_equal(out.samples, frames[2:].reshape(-1))
