"""Prune-while-training: filter removal right after a layer is trained.

Filters are ranked by the first-order Taylor criterion: for each sample the
magnitude of the spatial mean of ``activation * d loss / d activation`` in a
channel, averaged over the data. The lowest-ranked filters are removed from
the block and from the head's first consumer, then only the head is
fine-tuned.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .architecture import AuxHead, LayerBlock
from .errors import ConfigError, ShapeError
from .numerics import ConvParams, LinearParams, OptState, softmax_cross_entropy, step_decay_lr

SCORE_CHUNK = 250


@dataclass
class PruneRecord:
    layer: int
    width_before: int
    width_after: int
    removed: list
    scores: list
    criterion: str
    finetune_epochs: int
    acc_before: float | None = None
    acc_pruned: float | None = None
    acc_after: float | None = None
    finetune_risks: list = field(default_factory=list)

    def __post_init__(self):
        if self.width_after >= self.width_before:
            raise ShapeError("pruning must reduce the width")
        if len(set(self.removed)) != len(self.removed) or any(not 0 <= i < self.width_before for i in self.removed):
            raise ShapeError("removed filter indices must be unique and in range")

    def to_dict(self):
        return asdict(self)


def taylor_scores(block: LayerBlock, head: AuxHead, feats, labels, batch=SCORE_CHUNK):
    """Per-channel Taylor scores of the block output, averaged over samples."""
    total = np.zeros(block.out_width, dtype=np.float64)
    for i in range(0, len(feats), batch):
        x = feats[i:i + batch]
        y = labels[i:i + batch]
        act = block.forward(x, "eval")[0]
        z, cache = head.forward(act, "eval")
        _, g = softmax_cross_entropy(z, y)
        grad_act, _ = head.backward(cache, g * len(y))  # per-sample loss gradients
        contrib = (act.astype(np.float64) * grad_act).mean(axis=(2, 3))
        total += np.abs(contrib).sum(axis=0)
    return total / len(feats)


def l1_scores(block: LayerBlock):
    return np.abs(block.conv.kernel.astype(np.float64)).sum(axis=(1, 2, 3))


def rank_filters(block, head, feats, labels, criterion="taylor"):
    """One non-negative score per output filter; higher means more important."""
    if criterion == "taylor":
        return taylor_scores(block, head, feats, labels)
    if criterion == "l1":
        return l1_scores(block)
    raise ConfigError(f"unknown pruning criterion {criterion!r}")


def select_filters(scores, target_width):
    """Sorted indices to keep; equal scores drop the lower channel index first."""
    scores = np.asarray(scores)
    if not 0 < target_width < len(scores):
        raise ConfigError(f"target width {target_width} must lie in 1..{len(scores) - 1}")
    order = np.argsort(scores, kind="stable")
    removed = np.sort(order[: len(scores) - target_width])
    keep = np.setdiff1d(np.arange(len(scores)), removed)
    return keep, removed


def prune_block(block: LayerBlock, keep) -> LayerBlock:
    conv = ConvParams(block.conv.kernel[keep].copy(), block.conv.bias[keep].copy())
    bn = block.bn.select(keep) if block.bn is not None else None
    return LayerBlock(conv, block.downsample, block.downsample_kind, bn)


def prune_head_input(head: AuxHead, keep) -> AuxHead:
    """Drop input channels of the head's first consumer (first conv, or ``L``)."""
    head = head.copy()
    if head.convs:
        first = head.convs[0]
        head.convs[0] = ConvParams(first.kernel[:, keep].copy(), first.bias.copy())
    else:
        # features are flattened as channel * 4 + quadrant
        cols = (np.asarray(keep)[:, None] * 4 + np.arange(4)).ravel()
        head.linear = LinearParams(head.linear.weight[:, cols].copy(), head.linear.bias.copy())
    return head


def finetune_head(head, feats, labels, epochs, cfg, rng):
    """SGD on the head only over fixed features; returns the best epoch-end head.

    The starting head is a candidate too, scored like every epoch end by
    its training-set risk, so fine-tuning never makes the head worse on
    the data it sees.
    """
    from .trainer import head_risk, minibatches, run_epoch

    state = OptState(lr=cfg.lr)
    period = max(1, round(cfg.lr_period * epochs / max(cfg.epochs_per_layer, 1)))
    best_risk, best = head_risk(None, head, feats, labels)[0], head.copy()
    risks = [best_risk]
    for epoch in range(epochs):
        lr = step_decay_lr(epoch, cfg.lr, cfg.lr_decay, period)
        run_epoch(None, head, minibatches(feats, labels, cfg.batch_size, rng), state, lr, cfg.momentum)
        risk = head_risk(None, head, feats, labels)[0]
        risks.append(risk)
        if risk < best_risk:
            best_risk, best = risk, head.copy()
    return best, risks


def prune_and_finetune(block, head, cache, labels, target_width, epochs, cfg, rng,
                       test_cache=None, test_labels=None, layer=None):
    """Remove filters down to ``target_width`` and fine-tune the head.

    The block's weights are never updated; if it has batch norm, its running
    statistics are recomputed over the data before the head is fine-tuned.
    """
    from .trainer import EVAL_CHUNK, _chunked, head_accuracy, refresh_bn_stats

    if target_width >= block.out_width:
        raise ConfigError(f"target width {target_width} must be below current width {block.out_width}")
    feats = cache if isinstance(cache, np.ndarray) else cache.data
    acc_before = head_accuracy(block, head, test_cache.data, test_labels) if test_cache is not None else None
    scores = rank_filters(block, head, feats, labels, criterion=cfg.prune_criterion)
    keep, removed = select_filters(scores, target_width)
    new_block = prune_block(block, keep)
    new_head = prune_head_input(head, keep)
    acc_pruned = head_accuracy(new_block, new_head, test_cache.data, test_labels) if test_cache is not None else None
    refresh_bn_stats(new_block, feats)
    outputs = _chunked(lambda x: new_block.forward(x, "eval")[0], feats, EVAL_CHUNK)
    new_head, risks = finetune_head(new_head, outputs, labels, epochs, cfg, rng)
    acc_after = head_accuracy(new_block, new_head, test_cache.data, test_labels) if test_cache is not None else None
    record = PruneRecord(
        layer if layer is not None else -1, block.out_width, target_width,
        [int(i) for i in removed], [float(s) for s in scores], cfg.prune_criterion, epochs,
        acc_before, acc_pruned, acc_after, [float(r) for r in risks],
    )
    return new_block, new_head, record


def prune_block_input(block: LayerBlock, keep) -> LayerBlock:
    """Drop input channels of a downstream block that consumed the pruned layer."""
    keep = np.asarray(keep)
    if block.downsample and block.downsample_kind == "invertible":
        # each input channel became four consecutive phase channels
        keep = (keep[:, None] * 4 + np.arange(4)).ravel()
    conv = ConvParams(block.conv.kernel[:, keep].copy(), block.conv.bias.copy())
    bn = block.bn.copy() if block.bn is not None else None
    return LayerBlock(conv, block.downsample, block.downsample_kind, bn)
