"""Dense numerics and hand-written backward passes.

Tensors are plain ``numpy.float64`` arrays. Every differentiable op comes
as a forward/backward pair; the backward takes the forward inputs plus the
upstream gradient and returns gradients with respect to each input.

Convolution is cross-correlation (no kernel flip). Spatial ops accept a
single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12
FD_STEP = 1e-5


class ShapeError(ValueError):
    """Raised when operands do not conform; the message names the dimension."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"input rank: expected 3 (C,H,W) or 4 (N,C,H,W), got {x.ndim}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, kernel, bias, stride, padding):
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be nonnegative, got {padding}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel rank: expected 4 (C_out,C_in,kH,kW), got {kernel.ndim}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"C_in: input has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"C_out: bias shape {bias.shape} does not match kernel C_out={c_out}")
    h, w = x.shape[2:]
    if kh > h + 2 * padding:
        raise ShapeError(f"kH: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"kW: kernel width {kw} exceeds padded input width {w + 2 * padding}")


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, H', W', kH, kW)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernel`` and add a per-channel bias."""
    x, single = _batched(as_tensor(x))
    kernel = as_tensor(kernel)
    bias = as_tensor(bias)
    _check_conv(x, kernel, bias, stride, padding)
    _, _, kh, kw = kernel.shape
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', C_out)
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return out[0] if single else np.ascontiguousarray(out)


def conv2d_grad(x, kernel, upstream, stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d`."""
    x, single = _batched(as_tensor(x))
    kernel = as_tensor(kernel)
    g, _ = _batched(as_tensor(upstream))
    _check_conv(x, kernel, None, stride, padding)
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if g.shape != (n, c_out, ho, wo):
        raise ShapeError(f"upstream shape {g.shape[1:] if single else g.shape} "
                         f"does not match conv output {(c_out, ho, wo)}")

    win = _windows(x, kh, kw, stride, padding)
    grad_kernel = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = g.sum(axis=(0, 2, 3))

    gpad = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, kernel[:, :, i, j], axes=([1], [0]))  # (N, H', W', C_in)
            gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    grad_input = gpad[:, :, padding:padding + h, padding:padding + w]
    if single:
        grad_input = grad_input[0]
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# ----------------------------------------------------------------------
# dense, activations, pooling
# ----------------------------------------------------------------------

def dense(x, weights, bias) -> np.ndarray:
    """``weights @ x + bias`` for a vector, or row-wise for a batch ``(N, n)``."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if weights.ndim != 2:
        raise ShapeError(f"weights rank: expected 2, got {weights.ndim}")
    m, n = weights.shape
    if x.shape[-1] != n:
        raise ShapeError(f"n: input has {x.shape[-1]} features, weights expect {n}")
    if bias.shape != (m,):
        raise ShapeError(f"m: bias shape {bias.shape} does not match weights rows {m}")
    return x @ weights.T + bias


def dense_grad(x, weights, upstream):
    x = as_tensor(x)
    weights = as_tensor(weights)
    g = as_tensor(upstream)
    if g.shape[-1] != weights.shape[0]:
        raise ShapeError(f"m: upstream has {g.shape[-1]} entries, weights have {weights.shape[0]} rows")
    grad_x = g @ weights
    if x.ndim == 1:
        return grad_x, np.outer(g, x), g.copy()
    return grad_x, g.T @ x, g.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_grad(x, upstream) -> np.ndarray:
    x = as_tensor(x)
    g = as_tensor(upstream)
    if x.shape != g.shape:
        raise ShapeError(f"upstream shape {g.shape} does not match input {x.shape}")
    return np.where(x > 0, g, 0.0)


def _check_pool(x, window, stride):
    if window < 1 or stride < 1:
        raise ShapeError(f"window/stride must be positive, got {window}/{stride}")
    h, w = x.shape[-2:]
    if window > h:
        raise ShapeError(f"H: window {window} exceeds input height {h}")
    if window > w:
        raise ShapeError(f"W: window {window} exceeds input width {w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def max_pool2d(x, window: int = 2, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x)
    stride = window if stride is None else stride
    ho, wo = _check_pool(x, window, stride)
    out = None
    for i in range(window):
        for j in range(window):
            s = x[..., i:i + stride * ho:stride, j:j + stride * wo:stride]
            out = s.copy() if out is None else np.maximum(out, s)
    return out


def max_pool2d_grad(x, upstream, window: int = 2, stride: int | None = None) -> np.ndarray:
    """Route each upstream entry to the first maximal element of its window."""
    x = as_tensor(x)
    g = as_tensor(upstream)
    stride = window if stride is None else stride
    ho, wo = _check_pool(x, window, stride)
    out = max_pool2d(x, window, stride)
    if g.shape != out.shape:
        raise ShapeError(f"upstream shape {g.shape} does not match pool output {out.shape}")
    grad = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(window):
        for j in range(window):
            sl = (..., slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            hit = (x[sl] == out) & ~taken
            grad[sl] += np.where(hit, g, 0.0)
            taken |= hit
    return grad


def softmax(x) -> np.ndarray:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_grad(probs, upstream) -> np.ndarray:
    """Vector-Jacobian product of softmax, given its output ``probs``."""
    p = as_tensor(probs)
    g = as_tensor(upstream)
    if p.shape != g.shape:
        raise ShapeError(f"upstream shape {g.shape} does not match softmax output {p.shape}")
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def _check_probs(p, true_class):
    if p.ndim != 1:
        raise ShapeError(f"probs rank: expected 1, got {p.ndim}")
    if not (isinstance(true_class, (int, np.integer)) and 0 <= true_class < p.shape[0]):
        raise IndexError(f"invalid class index {true_class!r} for {p.shape[0]} classes")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probs must be nonnegative and sum to 1 within 1e-6")


def cross_entropy(predicted_probs, true_class: int) -> float:
    """``-log p[true_class]`` with the probability floored at 1e-12."""
    p = as_tensor(predicted_probs)
    _check_probs(p, true_class)
    return -math.log(max(p[true_class], PROB_FLOOR))


def cross_entropy_grad(predicted_probs, true_class: int) -> np.ndarray:
    p = as_tensor(predicted_probs)
    _check_probs(p, true_class)
    g = np.zeros_like(p)
    if p[true_class] > PROB_FLOOR:
        g[true_class] = -1.0 / p[true_class]
    return g


def softmax_cross_entropy(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and ``dloss/dlogits`` for a batch of logits ``(N, k)``.

    Fused form of ``cross_entropy(softmax(z), y)``; the gradient is ``p - onehot``.
    """
    p = softmax(logits)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(p.shape[0])
    losses = -np.log(np.maximum(p[rows, labels], PROB_FLOOR))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return losses, grad


def smooth_l1(predicted_box, true_box) -> float:
    """Huber-at-1 summed over coordinates."""
    d = as_tensor(predicted_box) - as_tensor(true_box)
    a = np.abs(d)
    return float(np.where(a < 1.0, 0.5 * d * d, a - 0.5).sum())


def smooth_l1_grad(predicted_box, true_box) -> np.ndarray:
    """Gradient of :func:`smooth_l1` with respect to ``predicted_box``."""
    d = as_tensor(predicted_box) - as_tensor(true_box)
    return np.clip(d, -1.0, 1.0)


@dataclass(frozen=True)
class MultiTaskLossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class LossValue:
    total: float
    classification_part: float
    regression_part: float


def multi_task_loss(cls, reg, cfg: MultiTaskLossConfig = MultiTaskLossConfig()) -> LossValue:
    """Classification loss plus ``cfg.lam`` times box regression loss.

    ``cls`` is ``(true_class, predicted_probs)`` and ``reg`` is
    ``(true_box, predicted_box)``.
    """
    y, probs = cls
    b, b_hat = reg
    lc = cross_entropy(probs, y)
    lr = smooth_l1(b_hat, b)
    return LossValue(lc + cfg.lam * lr, lc, lr)


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum; ``velocity`` holds one array per parameter."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params, grads, state: OptimizerState):
    """One update ``v <- m v + g; W <- W - lr v``.

    ``params``/``grads`` are either single arrays or dicts of named arrays;
    the same kind is returned. Velocities in ``state`` are updated in place.
    With ``momentum == 0`` this is plain gradient descent.
    """
    single = not isinstance(params, Mapping)
    if single:
        params, grads = {"param": params}, {"param": grads}
    out = {}
    for name, w in params.items():
        w = as_tensor(w)
        g = as_tensor(grads[name])
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match parameter {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        elif v.shape != w.shape:
            raise ShapeError(f"{name}: velocity shape {v.shape} does not match parameter {w.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        out[name] = w - state.learning_rate * v
    return out["param"] if single else out


def exponential_lr(epoch: int, n_epochs: int, start: float = 1e-3, end: float = 1e-6) -> float:
    """Geometric decay from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if n_epochs <= 1:
        return start
    return start * (end / start) ** (epoch / (n_epochs - 1))


# ----------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same channel count")
        if any(not s > 0 for s in self.std):
            raise ValueError(f"std must be positive per channel, got {self.std}")

    @classmethod
    def from_images(cls, images) -> "NormalizationStats":
        """Per-channel mean/std over a stack ``(N, C, H, W)``."""
        images = as_tensor(images)
        axes = (0, 2, 3)
        std = np.maximum(images.std(axis=axes), 1e-6)
        return cls(tuple(images.mean(axis=axes)), tuple(std))


def _stats_arrays(image, stats):
    c = image.shape[-3] if image.ndim >= 3 else None
    if c != len(stats.mean):
        raise ShapeError(f"C: image has {c} channels, stats have {len(stats.mean)}")
    mu = np.asarray(stats.mean)[:, None, None]
    sigma = np.asarray(stats.std)[:, None, None]
    return mu, sigma


def normalize(image, stats: NormalizationStats) -> np.ndarray:
    image = as_tensor(image)
    mu, sigma = _stats_arrays(image, stats)
    return (image - mu) / sigma


def denormalize(image, stats: NormalizationStats) -> np.ndarray:
    image = as_tensor(image)
    mu, sigma = _stats_arrays(image, stats)
    return image * sigma + mu


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|+|b|, floor)``."""
    a = as_tensor(a)
    b = as_tensor(b)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def numerical_grad(fn: Callable[[np.ndarray], float], x, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]


def grad_check(network_fn, params: Mapping[str, np.ndarray], inputs=None,
               tolerance: float = 1e-4, step: float = FD_STEP) -> GradCheckReport:
    """Compare analytic gradients against central differences, per parameter block.

    ``network_fn(params, inputs)`` must return ``(loss, grads)`` where
    ``grads`` maps the same names as ``params``.
    """
    params = {k: as_tensor(v) for k, v in params.items()}
    _, analytic = network_fn(params, inputs)
    report = {}
    for name, value in params.items():
        def loss_of(v, name=name):
            trial = dict(params)
            trial[name] = v
            return network_fn(trial, inputs)[0]

        numeric = numerical_grad(loss_of, value, step)
        report[name] = float(relative_error(analytic[name], numeric).max(initial=0.0))
    return GradCheckReport(report, tolerance)
