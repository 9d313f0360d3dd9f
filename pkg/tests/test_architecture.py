import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerwise.architecture import (
    AuxHead,
    LayerBlock,
    aux_forward,
    block_forward,
    build_network,
    init_block,
    init_head,
    invertible_downsample,
    invertible_upsample,
)
from layerwise.config import PRESETS, TrainConfig, from_preset
from layerwise.errors import ConfigError, ShapeError
from layerwise.numerics import ConvParams, LinearParams, grad_check, softmax_cross_entropy
from oracles import away_from_kink


def test_invertible_downsample_shapes():
    assert invertible_downsample(np.zeros((1, 3, 224, 224))).shape == (1, 12, 112, 112)
    assert invertible_downsample(np.zeros((1, 3, 32, 32))).shape == (1, 12, 16, 16)
    with pytest.raises(ShapeError):
        invertible_downsample(np.zeros((1, 3, 5, 4)))


def test_invertible_downsample_channel_order():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = invertible_downsample(x)
    # top-left, top-right, bottom-left, bottom-right phases
    assert np.array_equal(y[0, 0], x[0, 0, ::2, ::2])
    assert np.array_equal(y[0, 1], x[0, 0, ::2, 1::2])
    assert np.array_equal(y[0, 2], x[0, 0, 1::2, ::2])
    assert np.array_equal(y[0, 3], x[0, 0, 1::2, 1::2])


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_invertible_roundtrip(n, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, 2 * h, 2 * w))
    y = invertible_downsample(x)
    assert np.array_equal(invertible_upsample(y), x)
    assert sorted(y.ravel()) == sorted(x.ravel())


def test_identity_block_is_relu(rng):
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    block = LayerBlock(ConvParams.identity(4))
    assert np.array_equal(block_forward(x, block), np.maximum(x, 0))


def test_block_output_nonnegative(rng):
    spec = build_network(from_preset("cifar-k1-reduced")).blocks[0]
    block = init_block(spec, rng)
    assert block_forward(rng.standard_normal((3, 12, 16, 16)).astype(np.float32), block).min() >= 0


def test_imagenet_layer3_shapes(rng):
    spec = build_network(from_preset("imagenet-k23"))
    b = spec.blocks[2]
    assert (b.in_width, b.spatial_in, b.out_width, b.spatial_out) == (128, (112, 112), 256, (56, 56))
    small = b.__class__(8, 16, True, "invertible", False, (8, 8), (4, 4))
    block = init_block(small, rng)
    assert block_forward(rng.standard_normal((1, 8, 8, 8)).astype(np.float32), block).shape == (1, 16, 4, 4)


def test_aux_k1_shapes(rng):
    head = init_head(build_network(TrainConfig(width=256, downsample=())).aux[0], rng)
    assert head.k == 1 and head.convs == []
    z = aux_forward(rng.standard_normal((2, 256, 16, 16)).astype(np.float32), head)
    assert z.shape == (2, 10)


def test_aux_k3_has_two_convs(rng):
    spec = build_network(TrainConfig(k=3, width=8, aux_width=6, downsample=(), batchnorm="both")).aux[0]
    head = init_head(spec, rng)
    assert len(head.convs) == 2 and all(c.c_out == 6 for c in head.convs)


def test_aux_zero_linear_gives_bias(rng):
    b = rng.standard_normal(10).astype(np.float32)
    head = AuxHead(1, [], LinearParams(np.zeros((10, 16), np.float32), b))
    z = aux_forward(rng.standard_normal((3, 4, 8, 8)).astype(np.float32), head)
    assert np.array_equal(z, np.tile(b, (3, 1)))


def test_aux_k1_is_affine(rng):
    head = init_head(build_network(TrainConfig(width=4, downsample=())).aux[0], rng, np.float64)
    x, y = rng.standard_normal((2, 2, 4, 8, 8))
    a, b = 0.7, -1.3
    zero = aux_forward(np.zeros_like(x), head)
    lhs = aux_forward(a * x + b * y, head)
    rhs = a * aux_forward(x, head) + b * aux_forward(y, head) - (a + b - 1) * zero
    assert np.abs(lhs - rhs).max() < 1e-6


@pytest.mark.parametrize("k,bn", [(1, False), (2, True), (3, True), (3, False)])
def test_block_and_head_gradients(rng, k, bn):
    cfg = TrainConfig(k=k, width=3, aux_width=3, downsample=(), batchnorm="both" if bn else "none", input_downsample=False)
    spec = build_network(cfg, input_shape=(2, 4, 4))
    block = init_block(spec.blocks[0], rng, np.float64)
    head = init_head(spec.aux[0], rng, np.float64)
    x = rng.standard_normal((3, 2, 4, 4))
    labels = rng.integers(0, 10, 3)

    def loss():
        out, _ = block.forward(x, "train" if bn else "eval")
        return softmax_cross_entropy(head.forward(out, "train" if bn else "eval")[0], labels)[0]

    out, bcache = block.forward(x, "train" if bn else "eval")
    logits, hcache = head.forward(out, "train" if bn else "eval")
    _, g = softmax_cross_entropy(logits, labels)
    gx, hgrads = head.backward(hcache, g)
    bgrads = block.backward(bcache, gx)
    params = {**{"b." + k_: v for k_, v in block.params().items()}, **{"h." + k_: v for k_, v in head.params().items()}}
    grads = {**{"b." + k_: v for k_, v in bgrads.items()}, **{"h." + k_: v for k_, v in hgrads.items()}}
    names = sorted(params)
    assert grad_check(loss, [params[n] for n in names], [grads[n] for n in names]) < 1e-5


def test_presets_reproduce_width_tables():
    assert build_network(from_preset("cifar-k1")).widths == [256, 256, 512, 1024, 1024]
    k23 = build_network(from_preset("imagenet-k23"))
    assert k23.widths == [128, 128, 256, 256, 512, 512, 1024, 1024]
    assert [b.spatial_out[0] for b in k23.blocks] == [112, 112, 56, 56, 28, 28, 14, 14]
    k1 = build_network(from_preset("imagenet-k1"))
    assert k1.widths == [256, 256, 512, 1024, 2048, 2048, 4096, 4096]
    assert [b.spatial_out[0] for b in k1.blocks] == [112, 112, 56, 28, 14, 14, 7, 7]
    assert k1.blocks[0].in_width == 12 and k23.blocks[0].in_width == 12
    assert k23.aux[-1].width == 2048 and k23.aux[0].width == 256


def test_width_doubling_rule_all_presets():
    for name in PRESETS:
        spec = build_network(from_preset(name))
        cfg = from_preset(name)
        for j, b in enumerate(spec.blocks[1:], start=1):
            if cfg.widths or cfg.prune_width:
                continue
            assert b.out_width == b.in_width * (2 if b.downsample else 1)
        for b, nxt in zip(spec.blocks, spec.blocks[1:]):
            if not cfg.prune_width:
                assert nxt.in_width == b.out_width


def test_vgg11_preset_shapes():
    spec = build_network(from_preset("vgg11-k3"))
    assert spec.widths == [64, 128, 256, 256, 512, 512, 512, 512]
    assert [b.spatial_out[0] for b in spec.blocks] == [224, 112, 56, 56, 28, 28, 14, 14]
    assert all(a.pre_pool for a in spec.aux)


def test_prune_preset_widths():
    spec = build_network(from_preset("cifar-k3-prune"))
    assert [b.out_width for b in spec.blocks] == [128, 128, 128]
    assert [b.in_width for b in spec.blocks] == [12, 64, 64]
    assert [a.in_width for a in spec.aux] == [64, 64, 64]
    assert spec.aux[-1].width == 64


def test_bad_schedules():
    with pytest.raises(ConfigError):
        build_network(TrainConfig(layers=3, downsample=(3,)))
    with pytest.raises(ConfigError):
        build_network(TrainConfig(layers=3, downsample=(0,)))
    with pytest.raises(ConfigError):
        TrainConfig(width=0)


@pytest.mark.parametrize("kind", ["invertible", "stride", "avg", "max"])
def test_downsample_kinds_same_output_shape(rng, kind):
    cfg = TrainConfig(layers=3, width=4, downsample=(1,), downsample_kind=kind)
    spec = build_network(cfg)
    x = rng.standard_normal((2, 12, 16, 16)).astype(np.float32)
    for b in spec.blocks:
        x = block_forward(x, init_block(b, rng))
    assert x.shape == (2, 8, 8, 8)


def test_odd_spatial_aux(rng):
    head = init_head(build_network(from_preset("imagenet-k1")).aux[-1].__class__(1, 3, 3, False, 10), rng, np.float64)
    x = rng.standard_normal((2, 3, 7, 7))
    r = rng.standard_normal((2, 10))
    z, cache = head.forward(x)
    gx, grads = head.backward(cache, r)
    params = [x, head.linear.weight]
    assert grad_check(lambda: float((head.forward(x)[0] * r).sum()), params, [gx, grads["linear.weight"]]) < 1e-8


def test_relu_composite_grad(rng):
    # conv -> relu -> conv, probed away from kinks
    x = rng.standard_normal((2, 2, 5, 5))
    p1 = ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    from layerwise.numerics import conv2d, conv2d_backward, relu, relu_backward

    pre = conv2d(x, p1)
    shift = away_from_kink(pre) - pre
    r = rng.standard_normal(pre.shape)

    def loss():
        return float((relu(conv2d(x, p1) + shift) * r).sum())

    g = relu_backward(pre + shift, r)
    gx, gk, gb = conv2d_backward(x, p1, g)
    assert grad_check(loss, [x, p1.kernel, p1.bias], [gx, gk, gb]) < 1e-5
