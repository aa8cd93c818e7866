from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esk.dataset_io import AudioClip
from esk.features import (
    FeatureConfig,
    FeatureMatrix,
    hamming_window,
    load_features,
    logfbank,
    mel_filterbank,
    mel_grid_hz,
    mfcc,
    power_spectrum,
    pre_emphasize,
    save_features,
    triangle_weights,
)

from conftest import brute_force_dft


def naive_dct2_ortho(row):
    """Double-loop orthonormal DCT-II."""
    m = len(row)
    out = np.zeros(m)
    for k in range(m):
        acc = 0.0
        for n in range(m):
            acc += row[n] * np.cos(np.pi * k * (2 * n + 1) / (2 * m))
        scale = np.sqrt(1.0 / m) if k == 0 else np.sqrt(2.0 / m)
        out[k] = scale * acc
    return out


class TestPreEmphasize:
    def test_alpha_zero_identity(self):
        x = np.array([0.5, -0.25, 0.75])
        assert np.array_equal(pre_emphasize(x, 0.0), x)

    def test_direct_formula(self):
        y = pre_emphasize(np.array([1.0, 1.0, 1.0]), 0.97)
        assert np.allclose(y, [1.0, 0.03, 0.03], atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_reference_loop(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, 100)
        y = pre_emphasize(x, 0.97)
        expected = [x[0]] + [x[n] - 0.97 * x[n - 1] for n in range(1, 100)]
        assert np.allclose(y, expected, atol=1e-15)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            pre_emphasize(np.array([]), 0.5)
        with pytest.raises(ValueError):
            pre_emphasize(np.array([1.0]), 1.0)


class TestMelFilterbank:
    def test_single_triangle_peaks_at_one(self):
        # one filter from ~0 to Nyquist peaks at the mel midpoint with value 1.0
        grid = mel_grid_hz(1, 1e-6, 8000.0)
        center = grid[1]
        weights = triangle_weights(grid, np.array([center]))
        assert weights.shape == (1, 1)
        assert weights[0, 0] == pytest.approx(1.0, abs=1e-12)
        mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
        assert mel(center) == pytest.approx((mel(1e-6) + mel(8000.0)) / 2, rel=1e-12)

    def test_grid_matches_mel_formula(self):
        grid = mel_grid_hz(3, 50.0, 8000.0)
        mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
        inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
        expected = [inv(mel(50.0) + i * (mel(8000.0) - mel(50.0)) / 4) for i in range(5)]
        assert np.allclose(grid, expected, rtol=1e-12)

    def test_matrix_shape_and_defaults(self):
        cfg = FeatureConfig()
        assert cfg.n_mels == 256
        assert cfg.fmin_hz == 50.0
        assert cfg.fmax_hz == 8000.0
        assert cfg.preemph == 0.97
        assert cfg.win_len_s == 0.025
        assert cfg.step_s == 0.01
        assert cfg.window == "hamming"
        fb = mel_filterbank(cfg, 16000)
        assert fb.shape == (256, 257)
        assert fb.max() <= 1.0

    def test_fmax_over_nyquist_rejected(self):
        with pytest.raises(ValueError, match="Nyquist"):
            mel_filterbank(FeatureConfig(fmax_hz=9000.0), 16000)


class TestLogfbank:
    def test_all_zero_clip_hits_floor(self):
        cfg = FeatureConfig(n_mels=8, n_mfcc=8)
        out = logfbank(AudioClip(np.zeros(16000) + 1e-12, 16000), cfg)
        assert np.allclose(out.values, np.log(cfg.log_floor))

    def test_frame_count_arithmetic(self):
        out = logfbank(AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 16000), 16000))
        assert out.values.shape == (98, 256)

    def test_tone_argmax_is_nearest_filter(self):
        sr = 16000
        t = np.arange(sr) / sr
        clip = AudioClip(np.sin(2.0 * np.pi * 1000.0 * t) * 0.99, sr)
        cfg = FeatureConfig()
        out = logfbank(clip, cfg)
        centers = mel_grid_hz(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)[1:-1]
        nearest = int(np.argmin(np.abs(centers - 1000.0)))
        argmax_cols = out.values.argmax(axis=1)
        assert (argmax_cols == nearest).all()

    def test_tone_agrees_with_brute_force_dft(self):
        # recompute two frames of the pipeline with an O(N^2) DFT
        sr = 16000
        t = np.arange(4000) / sr
        clip = AudioClip(np.sin(2.0 * np.pi * 1000.0 * t) * 0.9, sr)
        cfg = FeatureConfig(n_mels=24, n_mfcc=13)
        out = logfbank(clip, cfg)
        emphasized = pre_emphasize(clip.samples, cfg.preemph)
        window = hamming_window(400)
        fb = mel_filterbank(cfg, sr)
        for k in (0, 7):
            frame = emphasized[k * 160 : k * 160 + 400] * window
            padded = np.concatenate([frame, np.zeros(112)])
            power = np.abs(brute_force_dft(padded)) ** 2
            expected = np.log(np.maximum(power @ fb.T, cfg.log_floor))
            assert np.allclose(out.values[k], expected, rtol=1e-9, atol=1e-9)

    def test_gain_shifts_log_by_two_log_g(self):
        rng = np.random.default_rng(3)
        samples = rng.uniform(-0.2, 0.2, 8000)
        cfg = FeatureConfig(n_mels=32, n_mfcc=13)
        base = logfbank(AudioClip(samples, 16000), cfg)
        scaled = logfbank(AudioClip(samples * 4.0, 16000), cfg)
        above = base.values > np.log(cfg.log_floor) + 1e-6
        shift = scaled.values[above] - base.values[above]
        assert np.allclose(shift, 2.0 * np.log(4.0), atol=1e-9)

    def test_too_short_clip(self):
        with pytest.raises(ValueError, match="shorter"):
            logfbank(AudioClip(np.zeros(300) + 0.1, 16000))


class TestMfcc:
    def test_constant_row_collapses_to_coefficient_zero(self):
        row = np.full(256, 3.25)
        coeffs = naive_dct2_ortho(row)
        assert coeffs[0] == pytest.approx(3.25 * np.sqrt(256), rel=1e-12)
        assert np.allclose(coeffs[1:], 0.0, atol=1e-9)

    def test_matches_naive_dct_oracle(self):
        rng = np.random.default_rng(9)
        clip = AudioClip(rng.uniform(-0.5, 0.5, 4000), 16000)
        cfg = FeatureConfig(n_mels=8, n_mfcc=8)
        fbank = logfbank(clip, cfg)
        out = mfcc(clip, cfg)
        for k in (0, 10, 20):
            assert np.allclose(out.values[k], naive_dct2_ortho(fbank.values[k]), atol=1e-9)

    def test_shape_and_default_counts(self):
        cfg = FeatureConfig()
        assert cfg.n_mels == 256
        assert cfg.n_mfcc == 40
        clip = AudioClip(np.random.default_rng(1).uniform(-0.5, 0.5, 16000), 16000)
        assert mfcc(clip, cfg).values.shape == (98, 40)

    def test_inverse_dct_reconstructs_logfbank(self):
        from scipy.fft import idct

        rng = np.random.default_rng(4)
        clip = AudioClip(rng.uniform(-0.5, 0.5, 4000), 16000)
        cfg = FeatureConfig(n_mels=16, n_mfcc=16)
        fbank = logfbank(clip, cfg)
        coeffs = mfcc(clip, cfg)
        recon = idct(coeffs.values, type=2, norm="ortho", axis=1)
        assert np.allclose(recon, fbank.values, atol=1e-9)


class TestPowerSpectrum:
    def test_fast_transform_matches_brute_force(self):
        rng = np.random.default_rng(17)
        frames = rng.normal(0.0, 1.0, (5, 512))
        fast = power_spectrum(frames, 512)
        for i in range(5):
            brute = np.abs(brute_force_dft(frames[i])) ** 2
            rel = np.abs(fast[i] - brute) / np.abs(brute)
            assert rel.max() < 1e-6


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        feats = FeatureMatrix(rng.normal(size=(13, 7)).astype(np.float32), "mfcc")
        save_features(tmp_path / "f.feat", feats)
        loaded = load_features(tmp_path / "f.feat")
        assert loaded.kind == "mfcc"
        assert np.array_equal(loaded.values, feats.values)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.feat").write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_features(tmp_path / "bad.feat")

    def test_truncated(self, tmp_path):
        feats = FeatureMatrix(np.ones((4, 4)), "logfbank")
        save_features(tmp_path / "f.feat", feats)
        data = (tmp_path / "f.feat").read_bytes()
        (tmp_path / "cut.feat").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_features(tmp_path / "cut.feat")
