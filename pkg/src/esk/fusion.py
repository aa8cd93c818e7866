"""Combining systems: early fusion of embeddings (concatenate or mean)
and late fusion of hard decisions by majority vote."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from esk.embeddings import EmbeddingVector

FUSION_MODES = ("concat", "mean", "vote")


@dataclass(frozen=True)
class FusionSpec:
    mode: str
    members: tuple[str, ...]  # identifiers in tie-break priority order

    def __post_init__(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if len(self.members) < 2:
            raise ValueError("fusion needs at least 2 members")


def early_fuse(
    systems: Sequence[dict[str, EmbeddingVector]], mode: str
) -> dict[str, EmbeddingVector]:
    """Fuse per-system embedding maps utterance by utterance.

    concat joins values in member order; mean averages element-wise (all
    dimensions must agree). Every system must cover the same utterances.
    """
    if mode not in ("concat", "mean"):
        raise ValueError(f"early fusion mode must be concat or mean, got {mode!r}")
    if len(systems) < 2:
        raise ValueError("early fusion needs at least 2 systems")
    ids = set(systems[0])
    for i, system in enumerate(systems[1:], start=2):
        if set(system) != ids:
            diff = sorted(ids.symmetric_difference(system))[:5]
            raise ValueError(f"system {i} covers different utterances (e.g. {diff})")

    fused: dict[str, EmbeddingVector] = {}
    for utt_id in systems[0]:
        vectors = [system[utt_id].values for system in systems]
        if mode == "concat":
            values = np.concatenate(vectors)
        else:
            dims = {v.size for v in vectors}
            if len(dims) > 1:
                raise ValueError(f"mean fusion needs equal dimensions, got {sorted(dims)}")
            values = np.mean(vectors, axis=0)
        fused[utt_id] = EmbeddingVector(utt_id, values, "fused")
    return fused


def late_fuse_vote(predictions: Sequence[int], member_order: Sequence[str] | None = None) -> int:
    """Strict-majority vote over member predictions.

    Without a strict majority the first member's prediction wins
    (predictions are given in member priority order).
    """
    if len(predictions) == 0:
        raise ValueError("no predictions to fuse")
    counts = Counter(predictions)
    winner, top = counts.most_common(1)[0]
    if top * 2 > len(predictions):
        return int(winner)
    return int(predictions[0])
