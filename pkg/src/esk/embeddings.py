"""Utterance embeddings: post-GAP acoustic vectors, precomputed textual
vectors read from file, and their concatenation.

Embedding CSVs start with a header line `id,<dim>` followed by one row
per utterance: the id then <dim> float values. Values are written with
repr so the round trip is bit-exact. A binary bulk format (magic ESKE)
exists for acoustic dumps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from esk.features import FeatureMatrix
from esk.net import NetModel, forward

TEXT_EMBED_DIM = 768

EMBED_MAGIC = b"ESKE"
SOURCE_CODES = {"acoustic": 0, "textual": 1, "fused": 2}
_CODE_SOURCES = {v: k for k, v in SOURCE_CODES.items()}


@dataclass
class EmbeddingVector:
    utterance_id: str
    values: np.ndarray
    source: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.source not in SOURCE_CODES:
            raise ValueError(f"unknown embedding source {self.source!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"embedding for {self.utterance_id!r} has non-finite values")

    @property
    def dim(self) -> int:
        return self.values.size


def extract_embedding(
    model: NetModel, features: FeatureMatrix, utterance_id: str = ""
) -> EmbeddingVector:
    """The GAP bottleneck output of the frozen model; the head is ignored."""
    emb, _ = forward(model, features, training=False)
    return EmbeddingVector(utterance_id, emb, "acoustic")


def fuse_concat(acoustic: EmbeddingVector, textual: EmbeddingVector) -> EmbeddingVector:
    """Acoustic values followed by textual values for the same utterance."""
    if acoustic.utterance_id != textual.utterance_id:
        raise ValueError(
            f"utterance id mismatch: {acoustic.utterance_id!r} vs {textual.utterance_id!r}"
        )
    return EmbeddingVector(
        acoustic.utterance_id,
        np.concatenate([acoustic.values, textual.values]),
        "fused",
    )


def save_embeddings_csv(path: str | Path, vectors: list[EmbeddingVector]) -> None:
    if not vectors:
        raise ValueError("nothing to save")
    dim = vectors[0].dim
    lines = [f"id,{dim}"]
    for v in vectors:
        if v.dim != dim:
            raise ValueError(
                f"inconsistent dimensions: {v.utterance_id!r} has {v.dim}, expected {dim}"
            )
        lines.append(v.utterance_id + "," + ",".join(repr(float(x)) for x in v.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings_csv(
    path: str | Path,
    expected_dim: int | None = None,
    source: str = "textual",
) -> dict[str, EmbeddingVector]:
    """Read an embedding CSV into an id -> vector map.

    The declared dimension must match expected_dim when given (textual
    files default to 768); duplicate ids and malformed rows are rejected.
    """
    path = Path(path)
    lines = [
        ln for ln in path.read_text(encoding="utf-8").splitlines()
        if ln and not ln.startswith("#")
    ]
    if not lines:
        raise ValueError(f"{path}: empty embedding file")
    header = lines[0].split(",")
    if len(header) != 2 or header[0] != "id":
        raise ValueError(f"{path}: expected header 'id,<dim>', got {lines[0]!r}")
    try:
        dim = int(header[1])
    except ValueError:
        raise ValueError(f"{path}: declared dimension {header[1]!r} is not an integer") from None
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: declared dimension {dim}, expected {expected_dim}")

    out: dict[str, EmbeddingVector] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        utt_id = fields[0]
        if utt_id in out:
            raise ValueError(f"{path}:{lineno}: duplicate id {utt_id!r}")
        if len(fields) - 1 != dim:
            raise ValueError(
                f"{path}:{lineno}: {len(fields) - 1} values for declared dimension {dim}"
            )
        try:
            values = np.array([float(x) for x in fields[1:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
        out[utt_id] = EmbeddingVector(utt_id, values, source)
    return out


def load_text_embeddings(
    path: str | Path, expected_dim: int = TEXT_EMBED_DIM
) -> dict[str, EmbeddingVector]:
    return load_embeddings_csv(path, expected_dim=expected_dim, source="textual")


def save_embeddings_binary(path: str | Path, vectors: list[EmbeddingVector]) -> None:
    """Bulk binary dump: magic ESKE, u32 count, u32 dim, u8 source, records."""
    if not vectors:
        raise ValueError("nothing to save")
    dim = vectors[0].dim
    source = vectors[0].source
    out = bytearray()
    out += EMBED_MAGIC
    out += struct.pack("<IIB", len(vectors), dim, SOURCE_CODES[source])
    for v in vectors:
        if v.dim != dim:
            raise ValueError(
                f"inconsistent dimensions: {v.utterance_id!r} has {v.dim}, expected {dim}"
            )
        encoded = v.utterance_id.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += v.values.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_embeddings_binary(path: str | Path) -> dict[str, EmbeddingVector]:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    count, dim, code = struct.unpack_from("<IIB", data, 4)
    if code not in _CODE_SOURCES:
        raise ValueError(f"{path}: unknown source code {code}")
    pos = 13
    out: dict[str, EmbeddingVector] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        utt_id = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 * dim > len(data):
            raise ValueError(f"{path}: truncated record for {utt_id!r}")
        values = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).copy()
        pos += 8 * dim
        if utt_id in out:
            raise ValueError(f"{path}: duplicate id {utt_id!r}")
        out[utt_id] = EmbeddingVector(utt_id, values, _CODE_SOURCES[code])
    return out
