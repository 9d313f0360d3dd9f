"""Forward/backward kernels for the primitives of the layerwise CNNs.

Tensors are plain ``numpy`` arrays in NCHW layout. Training runs in float32,
gradient verification in float64; every kernel keeps the dtype of its input.
Backward passes are derived by hand per primitive.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# "blas": fastest, reduction order chosen by the BLAS library.
# "ordered": inner sums of conv2d/linear accumulate strictly in index order,
# so adding or removing exactly-zero terms never changes a result.
_ACCUMULATION = ["blas"]


@contextlib.contextmanager
def ordered_accumulation():
    """Run forward conv/linear kernels with a fixed, index-ordered reduction."""
    _ACCUMULATION.append("ordered")
    try:
        yield
    finally:
        _ACCUMULATION.pop()


def _matmul(a, b):
    """``a @ b[i]`` per sample in the active accumulation mode."""
    if _ACCUMULATION[-1] == "ordered":
        return _backend.matmul_ordered(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return np.matmul(a, b)


def _check_4d(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


def _check_finite(x, name):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {name}")


@dataclass
class ConvParams:
    """A 3x3 convolution: kernel ``(c_out, c_in, 3, 3)`` and bias ``(c_out,)``."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise ShapeError(f"kernel must be (c_out, c_in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} filters")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @classmethod
    def init(cls, c_out, c_in, rng, dtype=np.float32):
        # fan-in scaled Gaussian, variance 2 / fan_in
        std = np.sqrt(2.0 / (c_in * 9))
        kernel = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
        return cls(kernel, np.zeros(c_out, dtype=dtype))

    @classmethod
    def identity(cls, width, dtype=np.float32):
        kernel = np.zeros((width, width, 3, 3), dtype=dtype)
        kernel[np.arange(width), np.arange(width), 1, 1] = 1
        return cls(kernel, np.zeros(width, dtype=dtype))

    def astype(self, dtype):
        return ConvParams(self.kernel.astype(dtype), self.bias.astype(dtype))

    def copy(self):
        return ConvParams(self.kernel.copy(), self.bias.copy())


# -- convolution ---------------------------------------------------------------


def conv2d(x, p: ConvParams, pad=1, stride=1, return_cols=False):
    """3x3 cross-correlation with zero padding.

    Each sample is multiplied by the kernel matrix separately, so a sample's
    output never depends on what else is in the batch.
    """
    _check_4d(x)
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.c_in}")
    _check_finite(x, "conv2d input")
    n, _, h, w = x.shape
    oh = (h + 2 * pad - 3) // stride + 1
    ow = (w + 2 * pad - 3) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"spatial size {(h, w)} too small for a 3x3 kernel with pad {pad}")
    x = np.ascontiguousarray(x)
    cols = _backend.im2col(x, pad, stride)
    wmat = p.kernel.reshape(p.c_out, -1).astype(x.dtype, copy=False)
    y = _matmul(wmat, cols)
    y += p.bias.astype(x.dtype, copy=False)[:, None]
    y = y.reshape(n, p.c_out, oh, ow)
    if return_cols:
        return y, cols
    return y


def conv2d_backward(x, p: ConvParams, grad_out, pad=1, stride=1, cols=None, need_grad_x=True):
    """Gradients ``(grad_x, grad_kernel, grad_bias)`` of a :func:`conv2d` call.

    ``grad_x`` is ``None`` when ``need_grad_x`` is false (frozen inputs).
    """
    _check_4d(x)
    _check_4d(grad_out, "grad_out")
    n, c, h, w = x.shape
    oh = (h + 2 * pad - 3) // stride + 1
    ow = (w + 2 * pad - 3) // stride + 1
    if grad_out.shape != (n, p.c_out, oh, ow) or c != p.c_in:
        raise ShapeError(f"grad_out {grad_out.shape} inconsistent with input {x.shape} and kernel {p.kernel.shape}")
    if cols is None:
        cols = _backend.im2col(np.ascontiguousarray(x), pad, stride)
    g = grad_out.reshape(n, p.c_out, oh * ow)
    grad_kernel = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(p.kernel.shape)
    grad_bias = g.sum(axis=(0, 2))
    grad_x = None
    if need_grad_x:
        wmat = p.kernel.reshape(p.c_out, -1).astype(x.dtype, copy=False)
        grad_cols = np.ascontiguousarray(np.matmul(wmat.T, g))
        grad_x = _backend.col2im(grad_cols, (n, c, h, w), pad, stride)
    return grad_x, grad_kernel, grad_bias


# -- pointwise and pooling -------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient 0 at the kink
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def avg_quadrants(x):
    """Average each of the four spatial quadrants, giving ``(n, c, 2, 2)``."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"quadrant averaging needs even spatial size, got {(h, w)}")
    return x.reshape(n, c, 2, h // 2, 2, w // 2).mean(axis=(3, 5))


def avg_quadrants_backward(grad_out, in_shape):
    n, c, h, w = in_shape
    scale = 1.0 / ((h // 2) * (w // 2))
    g = np.broadcast_to(grad_out[:, :, :, None, :, None] * scale, (n, c, 2, h // 2, 2, w // 2))
    return np.ascontiguousarray(g.reshape(n, c, h, w)).astype(grad_out.dtype, copy=False)


def _adaptive_bins(size):
    # PyTorch-style adaptive bins; they overlap by one row/col for odd sizes
    return [(0, -(-size // 2)), (size // 2, size)]


def adaptive_avg_2x2(x):
    """Average over two (possibly overlapping) bins per axis, for any size >= 2."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return avg_quadrants(x)
    out = np.empty((n, c, 2, 2), dtype=x.dtype)
    for i, (r0, r1) in enumerate(_adaptive_bins(h)):
        for k, (c0, c1) in enumerate(_adaptive_bins(w)):
            out[:, :, i, k] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


def adaptive_avg_2x2_backward(grad_out, in_shape):
    n, c, h, w = in_shape
    if h % 2 == 0 and w % 2 == 0:
        return avg_quadrants_backward(grad_out, in_shape)
    g = np.zeros(in_shape, dtype=grad_out.dtype)
    for i, (r0, r1) in enumerate(_adaptive_bins(h)):
        for k, (c0, c1) in enumerate(_adaptive_bins(w)):
            g[:, :, r0:r1, c0:c1] += grad_out[:, :, i, k][:, :, None, None] / ((r1 - r0) * (c1 - c0))
    return g


def pool2x2(x, kind="avg"):
    """Non-overlapping 2x2 average or max pooling."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even spatial size, got {(h, w)}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    if kind == "avg":
        return blocks.mean(axis=(3, 5))
    if kind == "max":
        return blocks.max(axis=(3, 5))
    raise ValueError(f"unknown pooling kind {kind!r}")


# -- linear head and loss -------------------------------------------------------


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @classmethod
    def init(cls, n_out, n_in, rng, dtype=np.float32):
        std = np.sqrt(1.0 / n_in)
        return cls((rng.standard_normal((n_out, n_in)) * std).astype(dtype), np.zeros(n_out, dtype=dtype))

    def astype(self, dtype):
        return LinearParams(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self):
        return LinearParams(self.weight.copy(), self.bias.copy())


def linear(x, p: LinearParams):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear input dim {flat.shape[1]} != {p.weight.shape[1]}")
    w = p.weight.astype(flat.dtype, copy=False)
    if _ACCUMULATION[-1] == "ordered":
        return _matmul(w, flat[:, :, None])[:, :, 0] + p.bias.astype(flat.dtype, copy=False)
    return flat @ w.T + p.bias.astype(flat.dtype, copy=False)


def linear_backward(x, p: LinearParams, grad_out):
    flat = x.reshape(x.shape[0], -1)
    grad_x = (grad_out @ p.weight.astype(grad_out.dtype, copy=False)).reshape(x.shape)
    return grad_x, grad_out.T @ flat, grad_out.sum(axis=0)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / n``."""
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad


# -- batch normalization --------------------------------------------------------------


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels, dtype=np.float32):
        return cls(
            np.ones(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def select(self, keep):
        return BatchNormParams(
            self.scale[keep].copy(), self.shift[keep].copy(),
            self.running_mean[keep].copy(), self.running_var[keep].copy(),
            self.eps, self.momentum,
        )

    def astype(self, dtype):
        return BatchNormParams(
            self.scale.astype(dtype), self.shift.astype(dtype),
            self.running_mean.astype(dtype), self.running_var.astype(dtype),
            self.eps, self.momentum,
        )

    def copy(self):
        return self.astype(self.scale.dtype)


def batchnorm(x, bn: BatchNormParams, mode="train"):
    """Per-channel batch normalization; returns ``(y, cache)``.

    Train mode normalizes with batch statistics and updates the running
    statistics in place (unbiased variance, as is customary); eval mode uses
    the running statistics.
    """
    _check_4d(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(f"batchnorm over {bn.channels} channels got input {x.shape}")
    dt = x.dtype
    if mode == "train":
        n, _, h, w = x.shape
        if n < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = n * h * w
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
        bn.running_var[...] = (1 - m) * bn.running_var + m * var * count / max(count - 1, 1)
    elif mode == "eval":
        mean, var = bn.running_mean.astype(dt), bn.running_var.astype(dt)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + bn.eps)).astype(dt)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * bn.scale.astype(dt)[None, :, None, None] + bn.shift.astype(dt)[None, :, None, None]
    return y, (xhat, inv_std, mode)


def batchnorm_backward(grad_out, bn: BatchNormParams, cache):
    """Gradients ``(grad_x, grad_scale, grad_shift)``."""
    xhat, inv_std, mode = cache
    grad_scale = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * bn.scale.astype(grad_out.dtype)[None, :, None, None]
    if mode == "eval":
        return gxhat * inv_std[None, :, None, None], grad_scale, grad_shift
    n, _, h, w = grad_out.shape
    count = n * h * w
    grad_x = (inv_std[None, :, None, None] / count) * (
        count * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return grad_x, grad_scale, grad_shift


# -- optimizer --------------------------------------------------------------------


@dataclass
class OptState:
    velocity: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    lr: float = 0.1


def step_decay_lr(epoch, lr0=0.1, factor=0.2, period=15):
    """Learning rate at a 0-based epoch for a step-decay schedule."""
    if lr0 <= 0:
        raise ValueError("lr0 must be positive")
    return lr0 * factor ** (epoch // period)


def sgd_momentum_step(params: dict, grads: dict, state: OptState, lr, momentum=0.9):
    """Heavy-ball momentum: ``v = momentum * v + g``; ``p -= lr * v``.

    Parameters are updated in place so that containers holding them stay
    valid.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
    for name, g in grads.items():
        p = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v
    state.step += 1
    state.lr = lr
    return params, state


# -- gradient verification ------------------------------------------------------------


def grad_check(loss_fn, inputs, analytic, eps=1e-5, max_coords=None, rng=None, atol=1e-8, reduce="coord"):
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must read ``inputs`` (float64 arrays, perturbed in place and
    restored) and return a scalar. ``analytic[i]`` is the gradient for
    ``inputs[i]``. With ``max_coords`` only that many coordinates per input are
    probed, chosen by ``rng``.

    The error per coordinate is ``|a - n| / max(|a|, |n|)``. Coordinates where
    both values are below ``atol`` count as agreeing zeros: a structurally
    zero gradient (e.g. a bias feeding batch norm) has no relative scale and
    its difference quotient is pure rounding noise.

    ``reduce="tensor"`` instead scores each input as a whole,
    ``|a - n| / max(|a|, |n|)`` in the 2-norm over the probed coordinates,
    which stays meaningful when some entries are tiny.
    """
    if reduce not in ("coord", "tensor"):
        raise ValueError(f"reduce must be 'coord' or 'tensor', got {reduce!r}")
    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    for arr, grad in zip(inputs, analytic):
        if arr.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        if not arr.flags.c_contiguous:
            raise ValueError("inputs must be C-contiguous so they can be perturbed in place")
        flat = arr.reshape(-1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(idx))
        for slot, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            num = numeric[slot] = (up - down) / (2 * eps)
            if reduce == "tensor":
                continue
            a = gflat[i]
            scale = max(abs(a), abs(num))
            if scale < atol:
                continue
            worst = max(worst, abs(a - num) / scale)
        if reduce == "tensor":
            a = gflat[idx]
            scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
            if scale >= atol:
                worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst
