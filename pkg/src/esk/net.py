"""Small residual convolutional network over feature matrices.

The input is a single-channel 2-D map (time x coefficient). Each stage
opens with a stride-2 3x3 convolution plus per-channel normalization and
a rectifier, followed by identity residual blocks of two 3x3
convolutions. A global average pool over the remaining positions yields
the embedding; a linear head maps it to class logits.

Convolutions use replicate padding so constant inputs stay constant
through the body regardless of length. Normalization uses batch
statistics in training mode (jointly over every position of every
example in the batch) and running averages at inference. Forward and
backward are implemented directly on numpy arrays; batches of
mixed-length inputs are processed by grouping equal shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from esk.features import FeatureMatrix

MODEL_MAGIC = b"ESKM"
MODEL_VERSION = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # weight of the old running statistic


@dataclass(frozen=True)
class NetConfig:
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    embed_dim: int = 512
    n_classes: int = 3
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise ValueError("blocks_per_stage and stage_channels must have equal length")
        if self.stage_channels[-1] != self.embed_dim:
            raise ValueError(
                f"last stage width {self.stage_channels[-1]} must equal "
                f"embed_dim {self.embed_dim}"
            )
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    @property
    def n_stages(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def min_frames(self) -> int:
        return 2 ** self.n_stages


PRESET_BLOCKS = {
    "resnet18": (2, 2, 2, 2),
    "resnet9": (1, 1, 1, 1),
    "test": (1, 1),
}


def make_config(
    preset: str,
    embed_dim: int = 512,
    n_classes: int = 3,
    label_smoothing: float = 0.0,
    seed: int = 0,
) -> NetConfig:
    """Build a NetConfig for a named preset, scaling stage widths so the
    final stage equals embed_dim (widths double per stage)."""
    if preset not in PRESET_BLOCKS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESET_BLOCKS)}")
    blocks = PRESET_BLOCKS[preset]
    n_stages = len(blocks)
    if embed_dim % (2 ** (n_stages - 1)) != 0:
        raise ValueError(f"embed_dim {embed_dim} not divisible by 2^{n_stages - 1}")
    channels = tuple(embed_dim >> (n_stages - 1 - i) for i in range(n_stages))
    return NetConfig(blocks, channels, embed_dim, n_classes, label_smoothing, seed)


@dataclass
class NetModel:
    """Architecture descriptor plus named parameter and state tensors."""

    config: NetConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return self.params["head.w"].dtype


def _layer_specs(cfg: NetConfig) -> Iterator[tuple[str, str, int, int]]:
    """Yield ("down"|"block", prefix, in_channels, out_channels) in order."""
    in_ch = 1
    for si, (n_blocks, ch) in enumerate(zip(cfg.blocks_per_stage, cfg.stage_channels)):
        yield "down", f"s{si}.down", in_ch, ch
        for bi in range(n_blocks):
            yield "block", f"s{si}.b{bi}", ch, ch
        in_ch = ch


def _bn_prefixes(cfg: NetConfig) -> list[str]:
    out = []
    for kind, prefix, _, _ in _layer_specs(cfg):
        if kind == "down":
            out.append(f"{prefix}.bn")
        else:
            out.extend([f"{prefix}.bn1", f"{prefix}.bn2"])
    return out


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: NetConfig, dtype=np.float32) -> NetModel:
    """Seeded Kaiming-uniform convolutions and head; identity normalization."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}

    def add_bn(prefix: str, ch: int) -> None:
        params[f"{prefix}.gamma"] = np.ones(ch, dtype=dtype)
        params[f"{prefix}.beta"] = np.zeros(ch, dtype=dtype)
        state[f"{prefix}.running_mean"] = np.zeros(ch, dtype=dtype)
        state[f"{prefix}.running_var"] = np.ones(ch, dtype=dtype)

    for kind, prefix, cin, cout in _layer_specs(config):
        if kind == "down":
            params[f"{prefix}.conv.w"] = _kaiming_uniform(
                rng, (cout, cin, 3, 3), cin * 9
            ).astype(dtype)
            add_bn(f"{prefix}.bn", cout)
        else:
            for i in (1, 2):
                params[f"{prefix}.conv{i}.w"] = _kaiming_uniform(
                    rng, (cout, cout, 3, 3), cout * 9
                ).astype(dtype)
                add_bn(f"{prefix}.bn{i}", cout)
    params["head.w"] = _kaiming_uniform(
        rng, (config.embed_dim, config.n_classes), config.embed_dim
    ).astype(dtype)
    params["head.b"] = np.zeros(config.n_classes, dtype=dtype)
    return NetModel(config, params, state)


def model_astype(model: NetModel, dtype) -> NetModel:
    return NetModel(
        model.config,
        {k: v.astype(dtype) for k, v in model.params.items()},
        {k: v.astype(dtype) for k, v in model.state.items()},
        dict(model.meta),
    )


# ---------------------------------------------------------------------------
# primitive layers; batches are lists of (original indices, [Bg,C,H,W]) groups

def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    b, c, hp, wp = xp.shape
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (b, c, 3, 3, ho, wo), (sb, sc, sh, sw, sh * stride, sw * stride))
    y = np.tensordot(win, w, axes=([1, 2, 3], [1, 2, 3]))  # [B,Ho,Wo,O]
    return np.ascontiguousarray(np.moveaxis(y, 3, 1)), (xp, stride, ho, wo)


def _conv_backward(dy: np.ndarray, w: np.ndarray, cache):
    xp, stride, ho, wo = cache
    b, c, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (b, c, 3, 3, ho, wo), (sb, sc, sh, sw, sh * stride, sw * stride))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 4, 5]))  # [O,C,3,3]
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # [B,Ho,Wo,C,3,3]
    dxp = np.zeros_like(xp)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += (
                np.moveaxis(dcols[:, :, :, :, ky, kx], 3, 1)
            )
    # adjoint of replicate padding: fold pad-ring gradients onto edge pixels
    dxp[:, :, 1, :] += dxp[:, :, 0, :]
    dxp[:, :, -2, :] += dxp[:, :, -1, :]
    dxp[:, :, :, 1] += dxp[:, :, :, 0]
    dxp[:, :, :, -2] += dxp[:, :, :, -1]
    return dxp[:, :, 1:-1, 1:-1], dw


def _bn_forward(groups, gamma, beta, run_mean, run_var, training: bool):
    if training:
        flat = np.concatenate(
            [g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1) for g in groups], axis=1
        )
        mean = flat.mean(axis=1)
        var = flat.var(axis=1)
        n = flat.shape[1]
        new_mean = BN_MOMENTUM * run_mean + (1.0 - BN_MOMENTUM) * mean
        new_var = BN_MOMENTUM * run_var + (1.0 - BN_MOMENTUM) * var
    else:
        mean, var = run_mean, run_var
        new_mean, new_var = run_mean, run_var
        n = 0
    inv = 1.0 / np.sqrt(var + BN_EPS)
    mean4 = mean[None, :, None, None]
    inv4 = inv[None, :, None, None]
    xhats = [(g - mean4) * inv4 for g in groups]
    outs = [gamma[None, :, None, None] * xh + beta[None, :, None, None] for xh in xhats]
    return outs, (new_mean.astype(gamma.dtype), new_var.astype(gamma.dtype)), (xhats, inv, n, training)


def _bn_backward(dys, gamma, cache):
    xhats, inv, n, training = cache
    dgamma = sum((dy * xh).sum(axis=(0, 2, 3)) for dy, xh in zip(dys, xhats))
    dbeta = sum(dy.sum(axis=(0, 2, 3)) for dy in dys)
    scale = (gamma * inv)[None, :, None, None]
    if training:
        dg4 = dgamma[None, :, None, None]
        db4 = dbeta[None, :, None, None]
        dxs = [scale * (dy - (db4 + xh * dg4) / n) for dy, xh in zip(dys, xhats)]
    else:
        dxs = [dy * scale for dy in dys]
    return dxs, dgamma, dbeta


def _forward_batch(model: NetModel, feats: list[np.ndarray], training: bool):
    """Run the body and head over a batch of T x D feature arrays.

    Returns (embeddings [B,E], logits [B,K], final maps per example,
    caches for backward, updated normalization state).
    """
    cfg = model.config
    dtype = model.dtype
    for f in feats:
        if f.shape[0] < cfg.min_frames:
            raise ValueError(
                f"input with {f.shape[0]} frames is shorter than the minimum "
                f"{cfg.min_frames} for {cfg.n_stages} stages"
            )

    by_shape: dict[tuple[int, int], list[int]] = {}
    for i, f in enumerate(feats):
        by_shape.setdefault(f.shape, []).append(i)
    group_idx = [np.array(ix) for ix in by_shape.values()]
    groups = [
        np.stack([feats[i] for i in ix]).astype(dtype)[:, None, :, :] for ix in group_idx
    ]

    new_state = dict(model.state)
    caches: list[dict[str, Any]] = []
    p = model.params

    def bn(groups_in, prefix):
        outs, (nm, nv), cache = _bn_forward(
            groups_in,
            p[f"{prefix}.gamma"],
            p[f"{prefix}.beta"],
            model.state[f"{prefix}.running_mean"],
            model.state[f"{prefix}.running_var"],
            training,
        )
        new_state[f"{prefix}.running_mean"] = nm
        new_state[f"{prefix}.running_var"] = nv
        return outs, cache

    for kind, prefix, _, _ in _layer_specs(cfg):
        if kind == "down":
            convs = [_conv_forward(g, p[f"{prefix}.conv.w"], 2) for g in groups]
            pre = [c[0] for c in convs]
            normed, bn_cache = bn(pre, f"{prefix}.bn")
            groups = [np.maximum(o, 0.0) for o in normed]
            caches.append(
                {"kind": "down", "prefix": prefix,
                 "conv": [c[1] for c in convs], "bn": bn_cache, "relu": groups}
            )
        else:
            skips = groups
            convs1 = [_conv_forward(g, p[f"{prefix}.conv1.w"], 1) for g in groups]
            n1, bn1_cache = bn([c[0] for c in convs1], f"{prefix}.bn1")
            r1 = [np.maximum(o, 0.0) for o in n1]
            convs2 = [_conv_forward(g, p[f"{prefix}.conv2.w"], 1) for g in r1]
            n2, bn2_cache = bn([c[0] for c in convs2], f"{prefix}.bn2")
            groups = [np.maximum(o + s, 0.0) for o, s in zip(n2, skips)]
            caches.append(
                {"kind": "block", "prefix": prefix,
                 "conv1": [c[1] for c in convs1], "bn1": bn1_cache, "relu1": r1,
                 "conv2": [c[1] for c in convs2], "bn2": bn2_cache, "relu2": groups}
            )

    n_examples = len(feats)
    emb = np.zeros((n_examples, cfg.embed_dim), dtype=dtype)
    final_maps: list[np.ndarray] = [None] * n_examples  # type: ignore[list-item]
    for ix, g in zip(group_idx, groups):
        emb[ix] = g.mean(axis=(2, 3))
        for row, i in enumerate(ix):
            final_maps[i] = g[row]
    logits = emb @ p["head.w"] + p["head.b"]
    caches.append({"kind": "gap", "group_idx": group_idx,
                   "shapes": [g.shape for g in groups], "emb": emb})
    return emb, logits, final_maps, caches, new_state


def _backward_batch(model: NetModel, caches, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with given dlogits, for every parameter."""
    p = model.params
    grads: dict[str, np.ndarray] = {}

    gap = caches[-1]
    emb = gap["emb"]
    grads["head.w"] = emb.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    demb = dlogits @ p["head.w"].T

    dgroups = []
    for ix, shape in zip(gap["group_idx"], gap["shapes"]):
        bg, c, h, w = shape
        dg = np.broadcast_to(
            demb[ix][:, :, None, None] / (h * w), (bg, c, h, w)
        ).astype(demb.dtype).copy()
        dgroups.append(dg)

    for cache in reversed(caches[:-1]):
        prefix = cache["prefix"]
        if cache["kind"] == "down":
            dys = [dg * (out > 0) for dg, out in zip(dgroups, cache["relu"])]
            dys, dgamma, dbeta = _bn_backward(dys, p[f"{prefix}.bn.gamma"], cache["bn"])
            grads[f"{prefix}.bn.gamma"] = dgamma
            grads[f"{prefix}.bn.beta"] = dbeta
            w = p[f"{prefix}.conv.w"]
            dw_total = np.zeros_like(w)
            dgroups_new = []
            for dy, conv_cache in zip(dys, cache["conv"]):
                dx, dw = _conv_backward(dy, w, conv_cache)
                dw_total += dw
                dgroups_new.append(dx)
            grads[f"{prefix}.conv.w"] = dw_total
            dgroups = dgroups_new
        else:
            dsum = [dg * (out > 0) for dg, out in zip(dgroups, cache["relu2"])]
            dn2, dgamma2, dbeta2 = _bn_backward(dsum, p[f"{prefix}.bn2.gamma"], cache["bn2"])
            grads[f"{prefix}.bn2.gamma"] = dgamma2
            grads[f"{prefix}.bn2.beta"] = dbeta2
            w2 = p[f"{prefix}.conv2.w"]
            dw2_total = np.zeros_like(w2)
            dr1 = []
            for dy, conv_cache in zip(dn2, cache["conv2"]):
                dx, dw = _conv_backward(dy, w2, conv_cache)
                dw2_total += dw
                dr1.append(dx)
            grads[f"{prefix}.conv2.w"] = dw2_total

            dr1 = [dg * (out > 0) for dg, out in zip(dr1, cache["relu1"])]
            dn1, dgamma1, dbeta1 = _bn_backward(dr1, p[f"{prefix}.bn1.gamma"], cache["bn1"])
            grads[f"{prefix}.bn1.gamma"] = dgamma1
            grads[f"{prefix}.bn1.beta"] = dbeta1
            w1 = p[f"{prefix}.conv1.w"]
            dw1_total = np.zeros_like(w1)
            dx_main = []
            for dy, conv_cache in zip(dn1, cache["conv1"]):
                dx, dw = _conv_backward(dy, w1, conv_cache)
                dw1_total += dw
                dx_main.append(dx)
            grads[f"{prefix}.conv1.w"] = dw1_total
            # skip connection carries dsum straight through
            dgroups = [dm + ds for dm, ds in zip(dx_main, dsum)]
    return grads


def forward(
    model: NetModel,
    features: FeatureMatrix,
    training: bool = False,
    return_map: bool = False,
):
    """Embedding (GAP over the final map) and logits for one input.

    With return_map=True also returns the final feature map [C, H, W] so
    the pooling contract can be checked directly.
    """
    emb, logits, maps, _, _ = _forward_batch(model, [features.values], training)
    if return_map:
        return emb[0], logits[0], maps[0]
    return emb[0], logits[0]


def swap_head(model: NetModel, new_n_classes: int, seed: int | None = None) -> NetModel:
    """Copy the body verbatim and attach a fresh head for a new task."""
    if new_n_classes < 2:
        raise ValueError(f"new_n_classes must be at least 2, got {new_n_classes}")
    cfg = replace(model.config, n_classes=new_n_classes)
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    params = {k: v.copy() for k, v in model.params.items()}
    params["head.w"] = _kaiming_uniform(
        rng, (cfg.embed_dim, new_n_classes), cfg.embed_dim
    ).astype(model.dtype)
    params["head.b"] = np.zeros(new_n_classes, dtype=model.dtype)
    state = {k: v.copy() for k, v in model.state.items()}
    return NetModel(cfg, params, state, dict(model.meta))


def _expected_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for kind, prefix, cin, cout in _layer_specs(cfg):
        if kind == "down":
            shapes[f"{prefix}.conv.w"] = (cout, cin, 3, 3)
            bns = [f"{prefix}.bn"]
        else:
            shapes[f"{prefix}.conv1.w"] = (cout, cout, 3, 3)
            shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
            bns = [f"{prefix}.bn1", f"{prefix}.bn2"]
        for bn in bns:
            shapes[f"{bn}.gamma"] = (cout,)
            shapes[f"{bn}.beta"] = (cout,)
            shapes[f"state:{bn}.running_mean"] = (cout,)
            shapes[f"state:{bn}.running_var"] = (cout,)
    shapes["head.w"] = (cfg.embed_dim, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def save_model(path: str | Path, model: NetModel) -> None:
    """Versioned binary model file (magic ESKM, float32 parameter table)."""
    cfg = model.config
    config_json = json.dumps(
        {
            "blocks_per_stage": list(cfg.blocks_per_stage),
            "stage_channels": list(cfg.stage_channels),
            "embed_dim": cfg.embed_dim,
            "n_classes": cfg.n_classes,
            "label_smoothing": cfg.label_smoothing,
            "seed": cfg.seed,
            "meta": model.meta,
        },
        sort_keys=True,
    ).encode("utf-8")
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<H", MODEL_VERSION)
    out += struct.pack("<I", len(config_json))
    out += config_json
    entries = [(name, model.params[name]) for name in sorted(model.params)]
    entries += [(f"state:{name}", model.state[name]) for name in sorted(model.state)]
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_model(path: str | Path) -> NetModel:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    pos = 6
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    raw_cfg = json.loads(data[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    config = NetConfig(
        tuple(raw_cfg["blocks_per_stage"]),
        tuple(raw_cfg["stage_channels"]),
        raw_cfg["embed_dim"],
        raw_cfg["n_classes"],
        raw_cfg["label_smoothing"],
        raw_cfg["seed"],
    )
    meta = raw_cfg.get("meta", {})
    expected = _expected_shapes(config)

    (n_entries,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if expected[name] != shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}"
            )
        if pos + 4 * count > len(data):
            raise ValueError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
        if name.startswith("state:"):
            state[name[len("state:") :]] = arr
        else:
            params[name] = arr
    missing = set(expected) - set(params) - {f"state:{k}" for k in state}
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return NetModel(config, params, state, meta)
