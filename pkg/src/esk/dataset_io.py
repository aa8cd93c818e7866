"""Audio and manifest I/O plus a deterministic synthetic dataset generator.

Only 16-bit mono PCM WAV is supported; there is deliberately no resampler,
so datasets are expected to arrive at a single rate (16 kHz everywhere in
this project).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VALID_SPLITS = ("train", "devel", "test")


class WavFormatError(ValueError):
    """Raised when a WAV file is not 16-bit mono PCM or is malformed."""


@dataclass
class AudioClip:
    """Mono PCM signal with its sample rate. Samples live in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip requires a nonempty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0 + 1e-6:
            raise ValueError(f"samples exceed [-1, 1] (peak {peak:.6g})")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: Path
    label: int
    split: str


@dataclass
class Manifest:
    """Ordered list of labelled utterances with train/devel/test splits."""

    entries: list[ManifestEntry]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ValueError(f"duplicate utterance id {e.utterance_id!r}")
            seen.add(e.utterance_id)
            if e.split not in VALID_SPLITS:
                raise ValueError(f"unknown split {e.split!r} for id {e.utterance_id!r}")
            if e.label < 0:
                raise ValueError(f"negative label for id {e.utterance_id!r}")
        labels = {e.label for e in self.entries}
        if labels and labels != set(range(max(labels) + 1)):
            raise ValueError(f"label set {sorted(labels)} is not a contiguous 0-based range")

    @property
    def n_classes(self) -> int:
        return max(e.label for e in self.entries) + 1

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in VALID_SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic harmonic-pitch dataset."""

    n_per_class: int
    n_classes: int
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_class <= 0 or self.n_classes <= 0:
            raise ValueError("n_per_class and n_classes must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


def read_wav(path: str | Path) -> AudioClip:
    """Read a RIFF/WAVE file containing 16-bit mono PCM.

    Integer samples are scaled by 1/32768. Rejects anything that is not
    plain PCM, mono, 16-bit, naming the offending property.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE container")

    fmt: tuple[int, int, int, int] | None = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body + 16 > len(data):
                raise WavFormatError(f"{path}: truncated fmt chunk")
            audio_format, n_channels, sample_rate, _, _, bits = struct.unpack_from(
                "<HHIIHH", data, body
            )
            if audio_format != 1:
                raise WavFormatError(f"{path}: format code {audio_format} is not PCM (1)")
            if n_channels != 1:
                raise WavFormatError(f"{path}: expected mono, got {n_channels} channels")
            if bits != 16:
                raise WavFormatError(f"{path}: expected 16-bit samples, got {bits}-bit")
            fmt = (audio_format, n_channels, sample_rate, bits)
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError(f"{path}: data chunk before fmt chunk")
            if body + chunk_size > len(data):
                raise WavFormatError(f"{path}: truncated data chunk")
            raw = np.frombuffer(data, dtype="<i2", count=chunk_size // 2, offset=body)
            if raw.size == 0:
                raise WavFormatError(f"{path}: empty data chunk")
            return AudioClip(raw.astype(np.float64) / 32768.0, fmt[2])
        # chunks are word-aligned
        pos = body + chunk_size + (chunk_size & 1)
    raise WavFormatError(f"{path}: missing data chunk")


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit mono PCM (round-trips within 1/32768)."""
    quantized = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = quantized.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest CSV (`id,path,label,split` header, one row per clip).

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["id", "path", "label", "split"]:
            raise ValueError(f"{path}: expected header id,path,label,split, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            utt_id, raw_path, raw_label, split = row
            try:
                label = int(raw_label)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {raw_label!r} is not an integer") from None
            if label < 0:
                raise ValueError(f"{path}:{lineno}: label must be nonnegative, got {label}")
            if split not in VALID_SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            p = Path(raw_path)
            entries.append(ManifestEntry(utt_id, p if p.is_absolute() else base / p, label, split))
    return Manifest(entries)


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    """Write a manifest CSV, storing paths relative to the CSV's directory."""
    path = Path(path)
    base = path.parent
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "label", "split"])
        for e in manifest.entries:
            try:
                rel = e.path.relative_to(base)
            except ValueError:
                rel = e.path
            writer.writerow([e.utterance_id, rel.as_posix(), e.label, e.split])


def _synth_clip(spec: SynthSpec, class_idx: int, clip_idx: int) -> AudioClip:
    """One amplitude-modulated sinusoid clip; class sets the fundamental."""
    rng = np.random.default_rng([spec.seed, class_idx, clip_idx])
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    f0 = 200.0 * (class_idx + 1)
    amp = rng.uniform(0.15, 0.75)
    carrier_phase = rng.uniform(0.0, 2.0 * np.pi)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 0.5 * (1.0 + np.sin(2.0 * np.pi * 4.0 * t + am_phase))
    x = amp * envelope * np.sin(2.0 * np.pi * f0 * t + carrier_phase)
    x += rng.uniform(-0.01, 0.01, n)
    return AudioClip(np.clip(x, -1.0, 1.0), spec.sample_rate)


def synth_dataset(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Generate the synthetic dataset and write WAVs plus manifest.csv.

    Class k is a sinusoid at 200*(k+1) Hz, amplitude-modulated at 4 Hz,
    with uniform noise at amplitude 0.01. Per-clip randomness (amplitude,
    phases, noise) is keyed by (seed, class, clip) so output bytes are a
    pure function of the spec. Each class is split 60/20/20 into
    train/devel/test, in clip order.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc

    n_train = int(spec.n_per_class * 0.6)
    n_devel = int(spec.n_per_class * 0.2)
    entries = []
    for k in range(spec.n_classes):
        for j in range(spec.n_per_class):
            clip = _synth_clip(spec, k, j)
            name = f"c{k}_{j:03d}.wav"
            write_wav(out_dir / name, clip)
            if j < n_train:
                split = "train"
            elif j < n_train + n_devel:
                split = "devel"
            else:
                split = "test"
            entries.append(ManifestEntry(f"c{k}_{j:03d}", out_dir / name, k, split))
    manifest = Manifest(entries)
    save_manifest(out_dir / "manifest.csv", manifest)
    return manifest
