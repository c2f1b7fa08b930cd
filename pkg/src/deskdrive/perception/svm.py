"""One-vs-rest linear SVM trained by hinge-loss subgradient descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SvmModel:
    weights: np.ndarray  # (n_classes, d)
    bias: np.ndarray     # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "SvmModel":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes))

    def params(self, prefix: str = "svm") -> dict[str, np.ndarray]:
        return {f"{prefix}.w": self.weights, f"{prefix}.b": self.bias}

    @classmethod
    def from_params(cls, p, prefix: str = "svm") -> "SvmModel":
        return cls(np.asarray(p[f"{prefix}.w"], dtype=np.float64), np.asarray(p[f"{prefix}.b"], dtype=np.float64))


@dataclass(frozen=True)
class SvmConfig:
    learning_rate: float = 1e-3
    reg: float = 1e-4
    epochs: int = 30
    batch_size: int = 16


def hinge_objective(model: SvmModel, x: np.ndarray, y: np.ndarray, reg: float) -> float:
    """Mean one-vs-rest hinge loss plus ``reg/2 * |W|^2``."""
    sign = np.where(y[:, None] == np.arange(model.n_classes)[None, :], 1.0, -1.0)
    margins = sign * (x @ model.weights.T + model.bias)
    return float(np.maximum(0.0, 1.0 - margins).sum(axis=1).mean() + 0.5 * reg * (model.weights ** 2).sum())


def svm_train(features, labels, cfg: SvmConfig = SvmConfig(), rng: np.random.Generator | None = None,
              n_classes: int | None = None) -> SvmModel:
    """Fit one binary hinge-loss classifier per class (that class vs the rest).

    Every class in ``range(n_classes)`` needs at least one example.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features must be (n, d) matching {len(y)} labels, got {x.shape}")
    k = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=k)
    empty = [c for c in range(k) if counts[c] == 0]
    if empty:
        raise ValueError(f"class {empty[0]} has no training examples")
    rng = np.random.default_rng(0) if rng is None else rng
    model = SvmModel.zeros(k, x.shape[1])
    sign = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    n = len(y)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, sb = x[idx], sign[idx]
            active = (sb * (xb @ model.weights.T + model.bias)) < 1.0   # (b, k)
            coef = -(sb * active) / len(idx)
            gw = coef.T @ xb + cfg.reg * model.weights
            gb = coef.sum(axis=0)
            model.weights -= cfg.learning_rate * gw
            model.bias -= cfg.learning_rate * gb
    return model


def svm_scores(model: SvmModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model dimension {model.dim}")
    return x @ model.weights.T + model.bias


def svm_classify(model: SvmModel, features) -> tuple[np.ndarray | int, np.ndarray]:
    """Predicted class (argmax margin, ties to the lowest id) and the margin scores.

    Accepts one feature vector or a batch.
    """
    scores = svm_scores(model, features)
    cls = np.argmax(scores, axis=-1)
    return (int(cls) if scores.ndim == 1 else cls), scores
