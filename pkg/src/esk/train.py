"""Training loop for the residual network: weighted cross-entropy with
optional label smoothing, SGD with momentum and decoupled weight decay,
and early stopping on development-set UAR.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from esk.features import FeatureMatrix
from esk.metrics import evaluate
from esk.net import NetModel, _backward_batch, _forward_batch

Batch = Sequence[tuple[FeatureMatrix, int]]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 1e-4
    momentum: float = 0.8
    max_epochs: int = 50
    early_stop_patience: int = 5
    batch_size: int = 16
    class_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must be positive")


FINETUNE_OVERRIDES = {"momentum": 0.0, "max_epochs": 300}


def finetune_config(**kwargs) -> TrainConfig:
    """TrainConfig with the fine-tuning defaults (no momentum, 300 epochs)."""
    merged = {**FINETUNE_OVERRIDES, **kwargs}
    return TrainConfig(**merged)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    devel_uar: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights w_k = N / (K * n_k); mean 1 on balanced data."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("all class counts must be positive")
    return counts.sum() / (counts.size * counts)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def loss(
    logits: np.ndarray,
    target_class: int,
    class_weights: Sequence[float] | None = None,
    label_smoothing: float = 0.0,
) -> float:
    """Weighted cross-entropy of one logit vector against a smoothed target.

    loss = w[target] * sum_k -q_k * ln p_k with p = softmax(logits) and
    q = (1 - eps) * onehot + eps / K.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    k = z.size
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")
    p = _softmax(z)
    q = np.full(k, label_smoothing / k)
    q[target_class] += 1.0 - label_smoothing
    w = 1.0 if class_weights is None else float(class_weights[target_class])
    return float(w * -(q * np.log(p)).sum())


def _loss_and_dlogits(logits, targets, class_weights, label_smoothing):
    """Mean batch loss and its gradient with respect to the logits."""
    n, k = logits.shape
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    q = np.full((n, k), label_smoothing / k)
    q[np.arange(n), targets] += 1.0 - label_smoothing
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[targets]
    losses = w * -(q * np.log(p)).sum(axis=1)
    dlogits = (w[:, None] * (p - q)) / n
    return float(losses.mean()), dlogits


def grad(
    model: NetModel,
    batch: Batch,
    class_weights: Sequence[float] | None = None,
    label_smoothing: float = 0.0,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of the mean batch loss (training mode)."""
    grads, _, _ = _grad_with_state(model, batch, class_weights, label_smoothing)
    return grads


def batch_loss(
    model: NetModel,
    batch: Batch,
    class_weights: Sequence[float] | None = None,
    label_smoothing: float = 0.0,
    training: bool = True,
) -> float:
    """Mean loss over a batch without touching model state."""
    if not batch:
        raise ValueError("batch must be nonempty")
    feats = [f.values for f, _ in batch]
    targets = np.array([y for _, y in batch])
    _, logits, _, _, _ = _forward_batch(model, feats, training)
    value, _ = _loss_and_dlogits(logits, targets, class_weights, label_smoothing)
    return value


def _grad_with_state(model, batch, class_weights, label_smoothing):
    if not batch:
        raise ValueError("batch must be nonempty")
    feats = [f.values for f, _ in batch]
    targets = np.array([y for _, y in batch])
    if targets.min() < 0 or targets.max() >= model.config.n_classes:
        raise ValueError(f"labels outside [0, {model.config.n_classes})")
    _, logits, _, caches, new_state = _forward_batch(model, feats, True)
    value, dlogits = _loss_and_dlogits(logits, targets, class_weights, label_smoothing)
    grads = _backward_batch(model, caches, dlogits.astype(model.dtype))
    return grads, value, new_state


def _decayed(name: str) -> bool:
    # weight decay applies to convolution and head weights only
    return name.endswith(".w")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One SGD update: g' = g + wd*p (weights only); v <- m*v + g'; p <- p - lr*v."""
    new_params = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype)
        if _decayed(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * p
        v = cfg.momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = p - cfg.lr * v
    return new_params, new_velocity


def predict_batch(model: NetModel, feats: list[FeatureMatrix]) -> np.ndarray:
    """Head argmax predictions at inference (running statistics)."""
    _, logits, _, _, _ = _forward_batch(model, [f.values for f in feats], False)
    return logits.argmax(axis=1)


def _devel_uar(model: NetModel, devel_set: Batch) -> float:
    preds = predict_batch(model, [f for f, _ in devel_set])
    truths = [y for _, y in devel_set]
    return evaluate(truths, preds, model.config.n_classes).uar


def train(
    model: NetModel,
    train_set: Batch,
    devel_set: Batch,
    cfg: TrainConfig,
    eval_fn: Callable[[NetModel, int], float] | None = None,
) -> tuple[NetModel, TrainHistory]:
    """Train with shuffled mini-batches and early stopping on devel UAR.

    Stops once devel UAR has not strictly improved for
    cfg.early_stop_patience consecutive epochs; returns the model from the
    best epoch (earliest on ties). eval_fn replaces the devel UAR
    computation when given (used by tests to script metric sequences).
    """
    if not train_set or not devel_set:
        raise ValueError("train and devel sets must be nonempty")
    n_classes = model.config.n_classes
    for _, y in list(train_set) + list(devel_set):
        if not 0 <= y < n_classes:
            raise ValueError(f"label {y} outside [0, {n_classes})")

    weights = cfg.class_weights
    rng = np.random.default_rng(cfg.seed)
    model = NetModel(
        model.config,
        {k: v.copy() for k, v in model.params.items()},
        {k: v.copy() for k, v in model.state.items()},
        dict(model.meta),
    )
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    history = TrainHistory()
    best = (-np.inf, 0, None, None)  # uar, epoch, params, state
    non_improving = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            grads, batch_value, new_state = _grad_with_state(
                model, batch, weights, model.config.label_smoothing
            )
            model.state = new_state
            model.params, velocity = sgd_step(model.params, grads, velocity, cfg)
            loss_sum += batch_value * len(batch)

        uar = eval_fn(model, epoch) if eval_fn is not None else _devel_uar(model, devel_set)
        history.train_loss.append(loss_sum / len(train_set))
        history.devel_uar.append(uar)

        if uar > best[0]:
            best = (
                uar,
                epoch,
                {k: v.copy() for k, v in model.params.items()},
                {k: v.copy() for k, v in model.state.items()},
            )
            non_improving = 0
        else:
            non_improving += 1
        history.best_epoch = best[1]
        history.stopped_epoch = epoch
        if non_improving >= cfg.early_stop_patience:
            break

    best_model = NetModel(model.config, best[2], best[3], dict(model.meta))
    return best_model, history
