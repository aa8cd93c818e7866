"""One-vs-rest linear SVM trained by dual coordinate descent.

Each binary problem minimizes 0.5 * (||w||^2 + b^2) + C * sum hinge with
the bias handled as an always-one augmented feature (so it shares the
regularizer, which keeps the dual box-constrained and lets plain
coordinate descent apply). A sweep visits every example in a seeded
random order; convergence is declared when the largest projected dual
gradient over a sweep drops below tol.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SVM_MAGIC = b"ESKS"
SVM_VERSION = 1


@dataclass
class SvmModel:
    weights: np.ndarray  # [K, D]
    bias: np.ndarray  # [K]
    C: float
    n_classes: int
    dim: int
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.weights.shape != (self.n_classes, self.dim):
            raise ValueError(
                f"weights shape {self.weights.shape} inconsistent with "
                f"K={self.n_classes}, D={self.dim}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model coefficients must be finite")


def primal_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    margins = 1.0 - y * (X @ w + b)
    return float(0.5 * (w @ w + b * b) + C * np.maximum(0.0, margins).sum())


def dual_objective(alpha: np.ndarray, w: np.ndarray, b: float) -> float:
    # sum(alpha) - 0.5 ||(w, b)||^2 with w, b the primal image of alpha
    return float(alpha.sum() - 0.5 * (w @ w + b * b))


def _solve_binary(
    X: np.ndarray,
    y: np.ndarray,
    C: float,
    rng: np.random.Generator,
    tol: float = 1e-4,
    max_epochs: int = 1000,
):
    """Dual coordinate descent for one binary problem (labels +-1).

    Returns (w, b, alpha, per-epoch (dual, primal) objective history). The
    dual objective is non-decreasing across epochs by construction; the
    primal evaluated at w(alpha) is not monotone for this solver.
    """
    n, d = X.shape
    q_diag = (X * X).sum(axis=1) + 1.0  # +1 for the augmented bias feature
    alpha = np.zeros(n)
    w = np.zeros(d)
    b = 0.0
    history = []
    for _ in range(max_epochs):
        max_violation = 0.0
        for i in rng.permutation(n):
            g = y[i] * (X[i] @ w + b) - 1.0
            if alpha[i] <= 0.0:
                pg = min(g, 0.0)
            elif alpha[i] >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            max_violation = max(max_violation, abs(pg))
            if pg != 0.0:
                new_alpha = min(max(alpha[i] - g / q_diag[i], 0.0), C)
                delta = new_alpha - alpha[i]
                if delta != 0.0:
                    w += delta * y[i] * X[i]
                    b += delta * y[i]
                    alpha[i] = new_alpha
        history.append((dual_objective(alpha, w, b), primal_objective(w, b, X, y, C)))
        if max_violation < tol:
            break
    return w, b, alpha, history


def svm_train(
    X: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    seed: int = 0,
    standardize: bool = False,
    tol: float = 1e-4,
    max_epochs: int = 1000,
) -> SvmModel:
    """Train K one-vs-rest binary classifiers over N x D embeddings."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"X {X.shape} and y ({y.size},) are inconsistent")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    n_classes = int(y.max()) + 1
    if X.shape[0] < n_classes:
        raise ValueError(f"need at least {n_classes} examples, got {X.shape[0]}")
    present = set(y.tolist())
    missing = set(range(n_classes)) - present
    if y.min() < 0 or missing:
        raise ValueError(f"classes {sorted(missing) or sorted(present)} invalid or absent")

    mean = scale = None
    if standardize:
        mean = X.mean(axis=0)
        scale = np.maximum(X.std(axis=0), 1e-12)
        X = (X - mean) / scale

    weights = np.zeros((n_classes, X.shape[1]))
    bias = np.zeros(n_classes)
    for k in range(n_classes):
        yk = np.where(y == k, 1.0, -1.0)
        rng = np.random.default_rng([seed, k])
        w, b, _, _ = _solve_binary(X, yk, C, rng, tol, max_epochs)
        weights[k] = w
        bias[k] = b
    return SvmModel(weights, bias, C, n_classes, X.shape[1], mean, scale)


def svm_predict(model: SvmModel, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Predicted class (ties go to the smallest index) and decision values."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"feature dimension {x.shape} does not match model ({model.dim},)")
    if model.feature_mean is not None:
        x = (x - model.feature_mean) / model.feature_scale
    decisions = model.weights @ x + model.bias
    return int(np.argmax(decisions)), decisions


def svm_predict_many(model: SvmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if model.feature_mean is not None:
        X = (X - model.feature_mean) / model.feature_scale
    return (X @ model.weights.T + model.bias).argmax(axis=1)


def save_svm(path: str | Path, model: SvmModel) -> None:
    """Binary model file: magic ESKS, version, K, D, C, optional
    standardization vectors, K x (D+1) float32 coefficients."""
    out = bytearray()
    out += SVM_MAGIC
    out += struct.pack("<H", SVM_VERSION)
    out += struct.pack("<IId", model.n_classes, model.dim, model.C)
    has_standardize = model.feature_mean is not None
    out += struct.pack("<B", int(has_standardize))
    if has_standardize:
        out += model.feature_mean.astype("<f8").tobytes()
        out += model.feature_scale.astype("<f8").tobytes()
    coeffs = np.concatenate([model.weights, model.bias[:, None]], axis=1)
    out += coeffs.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_svm(path: str | Path) -> SvmModel:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != SVM_MAGIC:
        raise ValueError(f"{path}: not an SVM model file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SVM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    n_classes, dim, c = struct.unpack_from("<IId", data, 6)
    pos = 6 + 16
    (has_standardize,) = struct.unpack_from("<B", data, pos)
    pos += 1
    mean = scale = None
    if has_standardize:
        mean = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).copy()
        pos += 8 * dim
        scale = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).copy()
        pos += 8 * dim
    count = n_classes * (dim + 1)
    if pos + 4 * count > len(data):
        raise ValueError(f"{path}: truncated coefficient table")
    coeffs = (
        np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        .reshape(n_classes, dim + 1)
        .astype(np.float64)
    )
    return SvmModel(coeffs[:, :-1], coeffs[:, -1], c, n_classes, dim, mean, scale)
