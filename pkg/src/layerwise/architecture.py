"""Network topology: blocks, downsampling, auxiliary classifiers, presets.

A block maps ``x_j`` to ``x_{j+1} = relu(conv(P_j x_j))`` (optionally with
batch norm before the ReLU). Its auxiliary head is ``k - 1`` constant-width
conv+ReLU layers, then quadrant averaging down to 2x2, then a linear map to
class logits. Block indices ``j`` are 0-based throughout, so a schedule
``downsample=(2, 3)`` downsamples the third and fourth blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    BatchNormParams,
    ConvParams,
    LinearParams,
    adaptive_avg_2x2,
    adaptive_avg_2x2_backward,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    linear,
    linear_backward,
    pool2x2,
    relu,
    relu_backward,
)

# Order of the four decimated copies within each input channel's group of 4.
CHANNEL_ORDER = "TL,TR,BL,BR"
DOWNSAMPLE_KINDS = ("invertible", "stride", "avg", "max")
BATCHNORM_MODES = ("none", "aux", "both")


def invertible_downsample(x):
    """Space-to-depth: ``(n, c, h, w) -> (n, 4c, h/2, w/2)``.

    Output channel ``4*i + q`` holds the ``q``-th 2x2 phase of input channel
    ``i`` with ``q`` running over top-left, top-right, bottom-left,
    bottom-right.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"invertible downsampling needs even spatial size, got {(h, w)}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, 4 * c, h // 2, w // 2))


def invertible_upsample(y):
    """Exact inverse of :func:`invertible_downsample`."""
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"channel count {c4} is not a multiple of 4")
    x = y.reshape(n, c4 // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(n, c4 // 4, 2 * h, 2 * w))


def apply_downsample(x, kind):
    """Pre-convolution downsampling ``P``; ``stride`` is folded into the conv."""
    if kind == "invertible":
        return invertible_downsample(x)
    if kind in ("avg", "max"):
        return pool2x2(x, kind)
    if kind == "stride":
        return x
    raise ConfigError(f"unknown downsample kind {kind!r}")


# -- parameterized layers -------------------------------------------------------------------


@dataclass
class LayerBlock:
    """One trainable block: optional downsampling, 3x3 conv, [batch norm], ReLU."""

    conv: ConvParams
    downsample: bool = False
    downsample_kind: str = "invertible"
    bn: BatchNormParams | None = None

    @property
    def in_width(self) -> int:
        if self.downsample and self.downsample_kind == "invertible":
            return self.conv.c_in // 4
        return self.conv.c_in

    @property
    def out_width(self) -> int:
        return self.conv.c_out

    @property
    def stride(self) -> int:
        return 2 if self.downsample and self.downsample_kind == "stride" else 1

    def params(self) -> dict:
        p = {"conv.kernel": self.conv.kernel, "conv.bias": self.conv.bias}
        if self.bn is not None:
            p["bn.scale"] = self.bn.scale
            p["bn.shift"] = self.bn.shift
        return p

    def copy(self):
        return LayerBlock(self.conv.copy(), self.downsample, self.downsample_kind,
                          None if self.bn is None else self.bn.copy())

    def forward(self, x, mode="eval"):
        if x.shape[1] != self.in_width:
            raise ShapeError(f"block expects {self.in_width} input channels, got {x.shape[1]}")
        xin = apply_downsample(x, self.downsample_kind) if self.downsample else x
        pre, cols = conv2d(xin, self.conv, stride=self.stride, return_cols=True)
        bn_cache = None
        if self.bn is not None:
            pre, bn_cache = batchnorm(pre, self.bn, mode)
        return relu(pre), (xin, cols, pre, bn_cache)

    def backward(self, cache, grad_out):
        """Parameter gradients; the block input is frozen so no input grad."""
        xin, cols, pre, bn_cache = cache
        g = relu_backward(pre, grad_out)
        grads = {}
        if self.bn is not None:
            g, grads["bn.scale"], grads["bn.shift"] = batchnorm_backward(g, self.bn, bn_cache)
        _, grads["conv.kernel"], grads["conv.bias"] = conv2d_backward(
            xin, self.conv, g, stride=self.stride, cols=cols, need_grad_x=False
        )
        return grads


@dataclass
class AuxHead:
    """Auxiliary classifier: ``k - 1`` conv+ReLU layers, quadrant average, linear."""

    k: int
    convs: list
    linear: LinearParams
    bns: list | None = None
    pre_pool: bool = False

    def __post_init__(self):
        if len(self.convs) != self.k - 1:
            raise ShapeError(f"k={self.k} head needs {self.k - 1} convolutions, got {len(self.convs)}")
        if self.bns is not None and len(self.bns) != len(self.convs):
            raise ShapeError("one batch norm per auxiliary convolution expected")

    @property
    def in_width(self) -> int:
        if self.convs:
            return self.convs[0].c_in
        return self.linear.weight.shape[1] // 4

    @property
    def width(self) -> int:
        return self.convs[0].c_out if self.convs else self.in_width

    @property
    def classes(self) -> int:
        return self.linear.weight.shape[0]

    def params(self) -> dict:
        p = {}
        for i, conv in enumerate(self.convs):
            p[f"aux{i}.kernel"] = conv.kernel
            p[f"aux{i}.bias"] = conv.bias
            if self.bns is not None:
                p[f"auxbn{i}.scale"] = self.bns[i].scale
                p[f"auxbn{i}.shift"] = self.bns[i].shift
        p["linear.weight"] = self.linear.weight
        p["linear.bias"] = self.linear.bias
        return p

    def copy(self):
        return AuxHead(
            self.k, [c.copy() for c in self.convs], self.linear.copy(),
            None if self.bns is None else [b.copy() for b in self.bns], self.pre_pool,
        )

    def forward(self, x, mode="eval"):
        if x.shape[1] != self.in_width:
            raise ShapeError(f"auxiliary head expects {self.in_width} channels, got {x.shape[1]}")
        caches = []
        h = pool2x2(x, "avg") if self.pre_pool else x
        for i, conv in enumerate(self.convs):
            pre, cols = conv2d(h, conv, return_cols=True)
            bn_cache = None
            if self.bns is not None:
                pre, bn_cache = batchnorm(pre, self.bns[i], mode)
            caches.append((h, cols, pre, bn_cache))
            h = relu(pre)
        pooled = adaptive_avg_2x2(h)
        return linear(pooled, self.linear), (x.shape, caches, h.shape, pooled)

    def backward(self, cache, grad_logits, need_grad_x=True):
        in_shape, caches, pre_avg_shape, pooled = cache
        grads = {}
        g, grads["linear.weight"], grads["linear.bias"] = linear_backward(pooled, self.linear, grad_logits)
        g = adaptive_avg_2x2_backward(g, pre_avg_shape)
        for i in reversed(range(len(self.convs))):
            h, cols, pre, bn_cache = caches[i]
            g = relu_backward(pre, g)
            if self.bns is not None:
                g, grads[f"auxbn{i}.scale"], grads[f"auxbn{i}.shift"] = batchnorm_backward(g, self.bns[i], bn_cache)
            need = need_grad_x or i > 0
            g, grads[f"aux{i}.kernel"], grads[f"aux{i}.bias"] = conv2d_backward(
                h, self.convs[i], g, cols=cols, need_grad_x=need
            )
        if need_grad_x and self.pre_pool:
            g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (g if need_grad_x else None), grads


def block_forward(x, block: LayerBlock):
    """``x_{j+1}`` from ``x_j`` with frozen (eval-mode) parameters."""
    return block.forward(x, "eval")[0]


def aux_forward(x, head: AuxHead):
    """Logits ``z`` of an auxiliary head in eval mode."""
    return head.forward(x, "eval")[0]


# -- network description --------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    in_width: int
    out_width: int
    downsample: bool
    downsample_kind: str
    batchnorm: bool
    spatial_in: tuple
    spatial_out: tuple

    @property
    def conv_in(self) -> int:
        return 4 * self.in_width if self.downsample and self.downsample_kind == "invertible" else self.in_width


@dataclass(frozen=True)
class AuxSpec:
    k: int
    in_width: int
    width: int
    batchnorm: bool
    classes: int
    pre_pool: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    layers: int
    blocks: tuple
    aux: tuple
    input_downsample: bool
    input_shape: tuple
    class_count: int

    @property
    def widths(self):
        return [b.out_width for b in self.blocks]


def _block_widths(cfg, in_width):
    if cfg.widths:
        if len(cfg.widths) != cfg.layers:
            raise ConfigError(f"{len(cfg.widths)} explicit widths given for {cfg.layers} layers")
        return list(cfg.widths)
    widths, w = [], cfg.width
    for j in range(cfg.layers):
        if j > 0 and j in cfg.downsample:
            w *= 2
        widths.append(w)
    return widths


def build_network(cfg, input_shape=None, prune_width=None) -> NetworkSpec:
    """Fully shaped network description for a :class:`~layerwise.config.TrainConfig`.

    ``input_shape`` is ``(channels, h, w)`` of the raw images; it defaults to
    the dataset's native shape. When ``prune_width`` (or ``cfg.prune_width``)
    is set, each block after the first consumes the pruned width of its
    predecessor.
    """
    from .config import dataset_shape

    input_shape = tuple(input_shape or dataset_shape(cfg.dataset))
    if cfg.layers < 1 or cfg.k < 1 or cfg.width < 1 or cfg.aux_width < 1:
        raise ConfigError("layers, k, width and aux_width must be positive")
    if any(not 0 <= j < cfg.layers for j in cfg.downsample):
        raise ConfigError(f"downsample indices {cfg.downsample} outside 0..{cfg.layers - 1}")
    if 0 in cfg.downsample and not cfg.widths:
        raise ConfigError("the first block cannot downsample; use input_downsample instead")
    if cfg.downsample_kind not in DOWNSAMPLE_KINDS:
        raise ConfigError(f"downsample_kind must be one of {DOWNSAMPLE_KINDS}")
    if cfg.batchnorm not in BATCHNORM_MODES:
        raise ConfigError(f"batchnorm must be one of {BATCHNORM_MODES}")
    c, h, w = input_shape
    if cfg.input_downsample:
        if h % 2 or w % 2:
            raise ConfigError(f"input downsampling needs even image size, got {(h, w)}")
        c, h, w = 4 * c, h // 2, w // 2
    widths = _block_widths(cfg, c)
    prune_width = prune_width if prune_width is not None else cfg.prune_width
    pruned = _block_widths(cfg.replace(width=prune_width, prune_width=None), c) if prune_width and not cfg.widths else None
    blocks, aux = [], []
    in_w = c
    for j in range(cfg.layers):
        ds = j in cfg.downsample
        spatial_in = (h, w)
        if ds:
            if h % 2 or w % 2:
                raise ConfigError(f"block {j} downsamples odd spatial size {(h, w)}")
            h, w = h // 2, w // 2
        blocks.append(BlockSpec(in_w, widths[j], ds, cfg.downsample_kind, cfg.batchnorm == "both", spatial_in, (h, w)))
        aux_w = cfg.aux_width
        if j == cfg.layers - 1 and cfg.final_aux_width:
            aux_w = cfg.final_aux_width
        aux_in = pruned[j] if pruned else widths[j]
        if min(h, w) < (4 if cfg.aux_pre_pool else 2):
            raise ConfigError(f"block {j} output {(h, w)} too small for the auxiliary head")
        aux.append(AuxSpec(cfg.k, aux_in, aux_w, cfg.batchnorm != "none" and cfg.k > 1, cfg.class_count, cfg.aux_pre_pool))
        in_w = pruned[j] if pruned else widths[j]
    return NetworkSpec(cfg.layers, tuple(blocks), tuple(aux), cfg.input_downsample, input_shape, cfg.class_count)


def init_block(spec: BlockSpec, rng, dtype=np.float32) -> LayerBlock:
    conv = ConvParams.init(spec.out_width, spec.conv_in, rng, dtype)
    bn = BatchNormParams.init(spec.out_width, dtype) if spec.batchnorm else None
    return LayerBlock(conv, spec.downsample, spec.downsample_kind, bn)


def init_head(spec: AuxSpec, rng, dtype=np.float32) -> AuxHead:
    convs, bns = [], [] if spec.batchnorm else None
    c = spec.in_width
    for _ in range(spec.k - 1):
        convs.append(ConvParams.init(spec.width, c, rng, dtype))
        if bns is not None:
            bns.append(BatchNormParams.init(spec.width, dtype))
        c = spec.width
    lin = LinearParams.init(spec.classes, 4 * c, rng, dtype)
    return AuxHead(spec.k, convs, lin, bns, spec.pre_pool)


def identity_block(width, dtype=np.float32) -> LayerBlock:
    """The ``W = Id`` block used as the progressive-improvement candidate."""
    return LayerBlock(ConvParams.identity(width, dtype))


def count_params(spec: NetworkSpec) -> int:
    total = 0
    for b in spec.blocks:
        total += b.out_width * (b.conv_in * 9 + 1)
    last = spec.aux[-1]
    c = last.in_width
    for _ in range(last.k - 1):
        total += last.width * (c * 9 + 1)
        c = last.width
    return total + last.classes * (4 * c + 1)


__all__ = [
    "AuxHead", "AuxSpec", "BlockSpec", "CHANNEL_ORDER", "LayerBlock", "NetworkSpec",
    "apply_downsample", "aux_forward", "block_forward", "build_network", "count_params",
    "identity_block", "init_block", "init_head", "invertible_downsample", "invertible_upsample",
]
