import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerwise.architecture import AuxSpec, BlockSpec, init_block, init_head
from layerwise.compression import (
    PruneRecord,
    l1_scores,
    prune_and_finetune,
    prune_block,
    prune_block_input,
    prune_head_input,
    rank_filters,
    select_filters,
    taylor_scores,
)
from layerwise.config import TrainConfig
from layerwise.errors import ConfigError, ShapeError
from layerwise.numerics import ordered_accumulation, softmax_cross_entropy
from layerwise.trainer import compute_cache, train_greedy


def _layer(rng, width=6, k=1, bn=False, dtype=np.float64, classes=3):
    block = init_block(BlockSpec(2, width, False, "invertible", bn, (6, 6), (6, 6)), rng, dtype)
    head = init_head(AuxSpec(k, width, 5, bn, classes), rng, dtype)
    feats = rng.standard_normal((10, 2, 6, 6)).astype(dtype)
    labels = rng.integers(0, classes, 10)
    return block, head, feats, labels


def _fd_taylor(block, head, feats, labels, h=1e-6):
    """Oracle: per-sample derivative of the loss w.r.t. a channel-wise scale on
    the block output, normalized by the spatial size, magnitude averaged."""
    act = block.forward(feats, "eval")[0]
    spatial = act.shape[2] * act.shape[3]
    scores = np.zeros(act.shape[1])
    for i in range(len(feats)):
        for c in range(act.shape[1]):
            losses = []
            for s in (1 + h, 1 - h):
                a = act[i:i + 1].copy()
                a[:, c] *= s
                losses.append(softmax_cross_entropy(head.forward(a, "eval")[0], labels[i:i + 1])[0])
            scores[c] += abs((losses[0] - losses[1]) / (2 * h)) / spatial
    return scores / len(feats)


@pytest.mark.parametrize("k", [1, 2])
def test_taylor_matches_scale_derivative_oracle(rng, k):
    block, head, feats, labels = _layer(rng, k=k)
    got = taylor_scores(block, head, feats, labels, batch=3)
    assert np.allclose(got, _fd_taylor(block, head, feats, labels), rtol=1e-5, atol=1e-9)


def test_zero_filter_scores_zero(rng):
    block, head, feats, labels = _layer(rng)
    block.conv.kernel[2] = 0
    block.conv.bias[2] = 0
    scores = taylor_scores(block, head, feats, labels)
    assert scores[2] == 0.0 and (scores >= 0).all()
    assert l1_scores(block)[2] == 0.0


def test_duplicated_filters_score_equally(rng):
    block, head, feats, labels = _layer(rng)
    block.conv.kernel[3] = block.conv.kernel[1]
    block.conv.bias[3] = block.conv.bias[1]
    lin = head.linear.weight.reshape(head.linear.weight.shape[0], -1, 4)
    lin[:, 3] = lin[:, 1]
    scores = taylor_scores(block, head, feats, labels)
    assert scores[3] == pytest.approx(scores[1], rel=1e-12)


def test_selection_ties_drop_lower_index():
    keep, removed = select_filters([1.0, 0.5, 0.5, 2.0, 0.5], 3)
    assert removed.tolist() == [1, 2] and keep.tolist() == [0, 3, 4]
    with pytest.raises(ConfigError):
        select_filters([1.0, 2.0], 2)
    with pytest.raises(ConfigError):
        select_filters([1.0, 2.0], 0)


@settings(max_examples=40, deadline=None)
@given(scores=st.lists(st.floats(0, 10), min_size=2, max_size=20), frac=st.floats(0.01, 0.99))
def test_selection_keeps_the_highest(scores, frac):
    target = max(1, min(len(scores) - 1, int(len(scores) * frac)))
    keep, removed = select_filters(scores, target)
    assert len(keep) == target and sorted(keep.tolist() + removed.tolist()) == list(range(len(scores)))
    assert min(scores[i] for i in keep) >= max(scores[i] for i in removed)


@pytest.mark.parametrize("k,bn", [(1, False), (2, False), (3, True)])
def test_pruning_dead_filters_leaves_logits_unchanged(rng, k, bn):
    block, head, feats, labels = _layer(rng, k=k, bn=bn, dtype=np.float32)
    dead = [0, 4]
    block.conv.kernel[dead] = 0
    block.conv.bias[dead] = -1.0  # stays at zero after ReLU
    if bn:
        block.bn.shift[dead] = -5.0
    keep = np.array([1, 2, 3, 5])
    with ordered_accumulation():
        before = head.forward(block.forward(feats, "eval")[0], "eval")[0]
        after = prune_head_input(head, keep).forward(prune_block(block, keep).forward(feats, "eval")[0], "eval")[0]
    assert np.array_equal(before, after)


def test_pruned_shapes_consistent(rng):
    block, head, feats, _ = _layer(rng, k=2, bn=True)
    keep = np.array([0, 3, 5])
    b, h = prune_block(block, keep), prune_head_input(head, keep)
    assert b.out_width == 3 and b.bn.channels == 3 and h.in_width == 3
    assert h.forward(b.forward(feats)[0])[0].shape == (10, 3)
    lin_head = prune_head_input(init_head(AuxSpec(1, 6, 5, False, 3), rng), keep)
    assert lin_head.linear.weight.shape == (3, 12)


def test_downstream_block_input_pruning(rng):
    down = init_block(BlockSpec(6, 4, True, "invertible", False, (6, 6), (3, 3)), rng, np.float64)
    keep = np.array([1, 4])
    pruned = prune_block_input(down, keep)
    assert pruned.conv.kernel.shape[1] == 8
    x = rng.standard_normal((2, 6, 6, 6))
    x[:, [0, 2, 3, 5]] = 0
    assert np.allclose(down.forward(x)[0], pruned.forward(x[:, keep])[0])


def test_prune_record_validation():
    with pytest.raises(ShapeError):
        PruneRecord(0, 4, 4, [], [], "taylor", 0)
    with pytest.raises(ShapeError):
        PruneRecord(0, 4, 2, [1, 1], [], "taylor", 0)


def test_unknown_criterion(rng):
    block, head, feats, labels = _layer(rng)
    with pytest.raises(ConfigError):
        rank_filters(block, head, feats, labels, "random")


def _cfg(**kw):
    base = dict(layers=1, k=2, width=8, aux_width=8, downsample=(), augment=False, epochs_per_layer=3,
                batch_size=16, dataset="mnist", class_count=2, batchnorm="both", prune_epochs=3, lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


def _toy(rng):
    from layerwise.data import LabeledDataset

    labels = np.arange(48) % 2
    images = rng.standard_normal((48, 1, 8, 8)).astype(np.float32) * 0.3
    images[labels == 1, :, :4] += 1.5
    return LabeledDataset(images, labels, "train", 2)


def test_prune_and_finetune_touches_only_head(rng):
    ds = _toy(rng)
    cfg = _cfg()
    net, _ = train_greedy(ds, cfg, rng=np.random.default_rng(0))
    cache = compute_cache(ds.images, net, 0)
    block, head = net.blocks[0], net.heads[0]
    kernel = block.conv.kernel.copy()
    new_block, new_head, record = prune_and_finetune(block, head, cache, ds.labels, 5, 3, cfg,
                                                     np.random.default_rng(1), cache, ds.labels, layer=0)
    keep = np.setdiff1d(np.arange(8), record.removed)
    assert np.array_equal(new_block.conv.kernel, kernel[keep])
    assert np.array_equal(block.conv.kernel, kernel)
    assert np.array_equal(new_block.bn.scale, block.bn.scale[keep])
    assert np.array_equal(new_block.bn.shift, block.bn.shift[keep])
    assert record.width_after == 5 and len(record.scores) == 8
    assert record.finetune_risks[0] >= min(record.finetune_risks)
    assert record.acc_before is not None and record.acc_after is not None


def test_finetune_never_raises_training_risk(rng):
    from layerwise.compression import finetune_head
    from layerwise.trainer import head_risk

    block, head, feats, labels = _layer(rng, dtype=np.float32)
    out = block.forward(feats)[0]
    best, risks = finetune_head(head, out, labels, 4, _cfg(lr=5.0), np.random.default_rng(0))
    assert head_risk(None, best, out, labels)[0] == min(risks) <= risks[0]


def test_greedy_training_with_pruning(rng):
    ds = _toy(rng)
    net, results = train_greedy(ds, _cfg(layers=2, prune_width=4), rng=np.random.default_rng(0))
    assert [b.out_width for b in net.blocks] == [4, 4]
    assert net.blocks[1].conv.kernel.shape[1] == 4
    assert all(r.prune is not None and r.prune.width_after == 4 for r in results)
    assert net.logits(ds.images, 1).shape == (48, 2)
