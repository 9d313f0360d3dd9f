"""Greedy layerwise training.

Layer ``j`` is trained jointly with its auxiliary head on the cached outputs
of the frozen layers ``0..j-1``. Every trajectory checkpoint (the starting
candidate and each epoch end) is scored by its full training-set risk in
eval mode and the best one is kept.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architecture import (
    AuxHead,
    LayerBlock,
    build_network,
    identity_block,
    init_block,
    init_head,
    invertible_downsample,
)
from .data import MetricsRecord, augment_batch
from .errors import ConfigError, NumericError, ShapeError
from .numerics import OptState, conv2d, sgd_momentum_step, softmax, softmax_cross_entropy, step_decay_lr

log = logging.getLogger(__name__)

EVAL_CHUNK = 500


# -- network container ------------------------------------------------------------------------------


@dataclass
class GreedyNet:
    """Frozen blocks, their auxiliary heads and per-layer training summaries."""

    config: object
    blocks: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    history: list = field(default_factory=list)
    normalization: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def class_count(self) -> int:
        return self.config.class_count

    def prepare(self, images):
        """Raw normalized images to the first block's input."""
        return invertible_downsample(images) if self.config.input_downsample else images

    def features(self, images, upto, batch=EVAL_CHUNK):
        """Representation fed to block ``upto`` (``upto = depth`` gives the last output)."""
        if not 0 <= upto <= self.depth:
            raise ShapeError(f"depth {upto} outside 0..{self.depth}")
        return _chunked(lambda x: frozen_forward(self.prepare(x), self.blocks[:upto]), images, batch)

    def logits(self, images, layer, batch=EVAL_CHUNK):
        """Auxiliary logits ``z`` of 0-based layer ``layer`` on raw images."""
        self._check_layer(layer)
        fn = lambda x: self.heads[layer].forward(frozen_forward(self.prepare(x), self.blocks[: layer + 1]))[0]
        return _chunked(fn, images, batch)

    def fingerprint(self, upto=None) -> str:
        upto = self.depth if upto is None else upto
        return params_fingerprint(self.blocks[:upto], self.config.input_downsample)

    def _check_layer(self, layer):
        if not 0 <= layer < self.depth:
            raise ShapeError(f"layer {layer} not trained (depth {self.depth})")


def frozen_forward(x, blocks):
    for block in blocks:
        x = block.forward(x, "eval")[0]
    return x


def _chunked(fn, data, batch):
    outs = [fn(data[i:i + batch]) for i in range(0, len(data), batch)]
    return np.concatenate(outs) if outs else np.empty((0,))


def block_state(block: LayerBlock) -> dict:
    state = dict(block.params())
    if block.bn is not None:
        state["bn.running_mean"] = block.bn.running_mean
        state["bn.running_var"] = block.bn.running_var
    return state


def head_state(head: AuxHead) -> dict:
    state = dict(head.params())
    for i, bn in enumerate(head.bns or ()):
        state[f"auxbn{i}.running_mean"] = bn.running_mean
        state[f"auxbn{i}.running_var"] = bn.running_var
    return state


def params_fingerprint(blocks, input_downsample=True) -> str:
    h = hashlib.sha256(f"ids={int(bool(input_downsample))}".encode())
    for j, block in enumerate(blocks):
        h.update(f"|{j}:{block.downsample}:{block.downsample_kind}".encode())
        for name, arr in sorted(block_state(block).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def data_fingerprint(images) -> str:
    h = hashlib.sha256(str(images.shape).encode())
    h.update(np.ascontiguousarray(images).tobytes())
    return h.hexdigest()[:16]


# -- activation cache ----------------------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Representations ``x_j`` of every sample for the current depth ``j``."""

    data: np.ndarray
    depth: int
    fingerprint: str
    source: str
    mode: str = "mem"
    path: Path | None = None

    def __len__(self):
        return len(self.data)

    @property
    def shape(self):
        return self.data.shape

    def verify(self, net: GreedyNet, depth=None, images=None):
        depth = self.depth if depth is None else depth
        if depth != self.depth or net.fingerprint(depth) != self.fingerprint:
            raise ConfigError(f"activation cache for depth {self.depth} does not match the frozen layers")
        if images is not None and data_fingerprint(images) != self.source:
            raise ConfigError("activation cache was computed from different images")

    def release(self):
        if self.path is not None and self.path.exists():
            del self.data
            self.path.unlink()


def compute_cache(images, net: GreedyNet, depth=None, mode="mem", cache_dir=None, batch=EVAL_CHUNK):
    """Apply the frozen prefix ``0..depth-1`` to every image, chunk by chunk.

    Each sample's result depends only on that sample, so the cache is
    bit-identical to a full forward pass regardless of chunking.
    """
    depth = net.depth if depth is None else depth
    if mode not in ("mem", "disk"):
        raise ConfigError(f"unknown cache mode {mode!r}")
    first = net.features(images[:1], depth)
    shape = (len(images),) + first.shape[1:]
    path = None
    if mode == "disk":
        directory = Path(cache_dir) if cache_dir else Path(tempfile.gettempdir())
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"cache-d{depth}-{net.fingerprint(depth)[:12]}-{data_fingerprint(images)}.npy"
        try:
            out = np.lib.format.open_memmap(path, mode="w+", dtype=first.dtype, shape=shape)
        except OSError as exc:
            raise OSError(f"cannot create disk cache at {path}: {exc}") from exc
    else:
        out = np.empty(shape, dtype=first.dtype)
    for i in range(0, len(images), batch):
        out[i:i + batch] = net.features(images[i:i + batch], depth)
    if mode == "disk":
        out.flush()
    return ActivationCache(out, depth, net.fingerprint(depth), data_fingerprint(images), mode, path)


# -- per-layer training ----------------------------------------------------------------------------------


@dataclass
class LayerTrainResult:
    layer: int
    block: LayerBlock
    head: AuxHead
    candidates: list  # dicts: label, epoch, train_risk, train_acc, test_acc
    best_index: int
    identity_applicable: bool
    wall_time: float = 0.0
    epoch_losses: list = field(default_factory=list)
    prune: object = None

    @property
    def train_risk(self) -> float:
        return self.candidates[self.best_index]["train_risk"]

    @property
    def train_acc(self) -> float:
        return self.candidates[self.best_index]["train_acc"]

    @property
    def test_acc(self):
        return self.candidates[self.best_index]["test_acc"]

    @property
    def best_epoch(self) -> int:
        return self.candidates[self.best_index]["epoch"]

    def summary(self) -> dict:
        return {
            "layer": self.layer,
            "train_risk": self.train_risk,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "best_epoch": self.best_epoch,
            "best_label": self.candidates[self.best_index]["label"],
            "identity_applicable": self.identity_applicable,
            "trajectory_risks": [c["train_risk"] for c in self.candidates],
        }


def head_risk(block, head, feats, labels, batch=EVAL_CHUNK):
    """Eval-mode mean cross-entropy and accuracy (%) over a whole feature set.

    ``block`` may be ``None`` to score the head directly on ``feats``.
    """
    total, correct = 0.0, 0
    for i in range(0, len(feats), batch):
        x = feats[i:i + batch]
        if block is not None:
            x = block.forward(x, "eval")[0]
        z = head.forward(x, "eval")[0]
        loss, _ = softmax_cross_entropy(z, labels[i:i + batch])
        total += loss * len(x)
        correct += int((z.argmax(axis=1) == labels[i:i + batch]).sum())
    return total / len(feats), 100.0 * correct / len(feats)


def head_accuracy(block, head, feats, labels, batch=EVAL_CHUNK):
    return head_risk(block, head, feats, labels, batch)[1]


def identity_applicable(net: GreedyNet, spec_block, spec_head, cfg) -> bool:
    """Whether ``W = Id`` with the previous head copied is an admissible start."""
    if not cfg.identity_candidate or net.depth == 0:
        return False
    prev = net.heads[-1]
    ok = (
        not spec_block.downsample
        and spec_block.in_width == spec_block.out_width
        and not spec_block.batchnorm
        and prev.in_width == spec_block.out_width
        and prev.k == spec_head.k
        and prev.width == spec_head.width
    )
    if not ok and not spec_block.downsample:
        log.warning("layer %d: identity candidate skipped (width or normalization mismatch)", net.depth)
    return ok


def train_step(block, head, x, y, state, lr, momentum, train_block=True):
    """One SGD step on a minibatch; returns the minibatch loss."""
    mode = "train"
    if block is not None:
        out, bcache = block.forward(x, mode if train_block else "eval")
    else:
        out = x
    z, hcache = head.forward(out, mode)
    loss, g = softmax_cross_entropy(z, y)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}")
    need_x = block is not None and train_block
    gx, grads = head.backward(hcache, g, need_grad_x=need_x)
    params = {"h." + k: v for k, v in head.params().items()}
    all_grads = {"h." + k: v for k, v in grads.items()}
    if need_x:
        params.update({"b." + k: v for k, v in block.params().items()})
        all_grads.update({"b." + k: v for k, v in block.backward(bcache, gx).items()})
    sgd_momentum_step(params, all_grads, state, lr, momentum)
    return loss


def run_epoch(block, head, batches, state, lr, momentum, train_block=True):
    losses = []
    for x, y in batches:
        if len(y) < 2 and _has_bn(block, head, train_block):
            continue
        losses.append(train_step(block, head, x, y, state, lr, momentum, train_block))
    state.epoch += 1
    return float(np.mean(losses)) if losses else float("nan")


def _has_bn(block, head, train_block):
    return (train_block and block is not None and block.bn is not None) or bool(head.bns)


def minibatches(feats, labels, batch_size, rng, transform=None):
    order = rng.permutation(len(labels))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        x = transform(idx) if transform is not None else feats[idx]
        yield x, labels[idx]


def train_layer(net: GreedyNet, cache: ActivationCache, labels, cfg, rng, test_cache=None, test_labels=None,
                writer=None, run_id="run", raw_images=None, input_shape=None):
    """Train block ``net.depth`` and its head on ``cache``; return the best checkpoint.

    ``raw_images`` enables on-the-fly augmentation: each minibatch is
    augmented in image space and pushed through the frozen prefix.
    """
    j = net.depth
    if j >= cfg.layers:
        raise ConfigError(f"all {cfg.layers} layers already trained")
    cache.verify(net, j)
    spec = build_network(cfg, input_shape=input_shape)
    bspec = spec.blocks[j]
    if j > 0:
        bspec = dataclasses.replace(bspec, in_width=net.blocks[-1].out_width)
    hspec = dataclasses.replace(spec.aux[j], in_width=bspec.out_width)
    if cache.shape[1] != bspec.in_width:
        raise ShapeError(f"cache has {cache.shape[1]} channels, block {j} expects {bspec.in_width}")
    t0 = time.perf_counter()
    block = init_block(bspec, rng)
    head = init_head(hspec, rng)
    use_identity = identity_applicable(net, bspec, hspec, cfg)

    candidates = []
    best = None

    def score(label, epoch, b, h):
        nonlocal best
        risk, acc = head_risk(b, h, cache.data, labels)
        if not np.isfinite(risk):
            raise NumericError(f"layer {j}: non-finite training risk at epoch {epoch}")
        test_acc = head_accuracy(b, h, test_cache.data, test_labels) if test_cache is not None else None
        candidates.append({"label": label, "epoch": epoch, "train_risk": risk, "train_acc": acc, "test_acc": test_acc})
        if best is None or risk < candidates[best[0]]["train_risk"]:
            best = (len(candidates) - 1, b.copy(), h.copy())
        if writer is not None:
            writer.write(MetricsRecord(run_id, j, epoch, risk, acc, test_acc, lr_at(epoch), time.perf_counter() - t0, label))

    def lr_at(epoch):
        return step_decay_lr(epoch - 1, cfg.lr, cfg.lr_decay, cfg.lr_period) if epoch > 0 else None

    if use_identity:
        score("identity", 0, identity_block(bspec.out_width), net.heads[-1].copy())
    else:
        score("init", 0, block, head)

    transform = None
    if raw_images is not None and cfg.augment:
        frozen = net.blocks

        def transform(idx):
            return frozen_forward(net.prepare(augment_batch(raw_images[idx], rng)), frozen)

    state = OptState(lr=cfg.lr)
    losses = []
    for epoch in range(1, cfg.epochs_per_layer + 1):
        lr = lr_at(epoch)
        batches = minibatches(cache.data if transform is None else None, labels, cfg.batch_size, rng, transform)
        try:
            losses.append(run_epoch(block, head, batches, state, lr, cfg.momentum))
        except NumericError as exc:
            raise NumericError(f"layer {j} diverged in epoch {epoch} (lr {lr:g}): {exc}") from exc
        score("epoch", epoch, block, head)

    index, best_block, best_head = best
    result = LayerTrainResult(j, best_block, best_head, candidates, index, use_identity,
                              time.perf_counter() - t0, losses)
    return result


# -- outer loop --------------------------------------------------------------------------------------


def train_greedy(train, cfg, test=None, writer=None, checkpoint_path=None, run_id="run", rng=None):
    """Train ``cfg.layers`` blocks in order, freezing each before the next.

    The net is checkpointed after every layer; on failure the partial net
    is checkpointed before the error propagates.
    """
    from .checkpoint import save_checkpoint

    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    input_shape = train.images.shape[1:]
    net = GreedyNet(cfg, normalization={"mean": list(train.mean), "std": list(train.std)})
    results = []
    try:
        for j in range(cfg.layers):
            cache = compute_cache(train.images, net, mode=cfg.cache, cache_dir=cfg.cache_dir or None)
            test_cache = compute_cache(test.images, net, mode=cfg.cache, cache_dir=cfg.cache_dir or None) if test else None
            result = train_layer(
                net, cache, train.labels, cfg, rng,
                test_cache, test.labels if test else None, writer, run_id,
                raw_images=train.images if cfg.augment else None, input_shape=input_shape,
            )
            block, head = result.block, result.head
            if cfg.prune_width is not None:
                from .compression import prune_and_finetune

                block, head, record = prune_and_finetune(
                    block, head, cache, train.labels, cfg.prune_width, cfg.prune_epochs, cfg, rng,
                    test_cache=test_cache, test_labels=test.labels if test else None, layer=j,
                )
                result.prune = record
                result.block, result.head = block, head
            net.blocks.append(block)
            net.heads.append(head)
            summary = result.summary()
            if result.prune is not None:
                summary["prune"] = result.prune.to_dict()
            net.history.append(summary)
            results.append(result)
            if writer is not None:
                writer.write({"kind": "layer", "run_id": run_id, **summary})
            cache.release()
            if test_cache is not None:
                test_cache.release()
            if checkpoint_path is not None:
                save_checkpoint(net, checkpoint_path)
    except Exception:
        if checkpoint_path is not None and net.depth:
            save_checkpoint(net, checkpoint_path)
        raise
    return net, results


# -- evaluation ---------------------------------------------------------------------------------------


def topk_accuracy(logits, labels, ks=(1, 5)):
    """Top-k accuracies in percent; ties broken towards the lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")
    out = []
    for k in ks:
        k = min(k, logits.shape[1])
        out.append(100.0 * float((order[:, :k] == labels[:, None]).any(axis=1).mean()))
    return tuple(out)


def evaluate(net: GreedyNet, images, labels, layer, cache: ActivationCache | None = None):
    """``(top1, top5)`` of the layer-``layer`` auxiliary classifier.

    With ``cache`` (holding the input of block ``layer``) only the last block
    and its head are applied.
    """
    net._check_layer(layer)
    if cache is not None:
        cache.verify(net, layer)
        logits = _chunked(lambda x: net.heads[layer].forward(net.blocks[layer].forward(x)[0])[0], cache.data, EVAL_CHUNK)
    else:
        logits = net.logits(images, layer)
    return topk_accuracy(logits, np.asarray(labels))


def ensemble_weights(depth):
    """``2^j`` for 1-based layer index ``j``."""
    return [2.0 ** (j + 1) for j in range(depth)]


def ensemble_combine(layer_logits, kind="prob"):
    """``Z = sum_j 2^j s(z_j)`` with ``s`` the softmax (``prob``) or identity (``logit``)."""
    if kind not in ("prob", "logit"):
        raise ConfigError(f"ensemble kind must be 'prob' or 'logit', got {kind!r}")
    if not layer_logits:
        raise ShapeError("ensemble needs at least one trained layer")
    total = None
    for w, z in zip(ensemble_weights(len(layer_logits)), layer_logits):
        term = w * (softmax(z) if kind == "prob" else z)
        total = term if total is None else total + term
    return total


def ensemble_predict(net: GreedyNet, images, kind=None, batch=EVAL_CHUNK):
    """Ensemble scores ``Z`` for raw images, sharing the forward pass across layers."""
    if net.depth < net.config.layers:
        raise ShapeError(f"ensemble needs all {net.config.layers} layers; {net.depth} trained")
    kind = kind or net.config.ensemble

    def fn(x):
        h = net.prepare(x)
        zs = []
        for block, head in zip(net.blocks, net.heads):
            h = block.forward(h)[0]
            zs.append(head.forward(h)[0])
        return ensemble_combine(zs, kind)

    return _chunked(fn, images, batch)


def refresh_bn_stats(block: LayerBlock, feats, batch=EVAL_CHUNK):
    """Replace a block's running statistics by exact population statistics."""
    if block.bn is None:
        return
    total = sq = None
    count = 0
    for i in range(0, len(feats), batch):
        x = feats[i:i + batch]
        if block.downsample:
            from .architecture import apply_downsample

            x = apply_downsample(x, block.downsample_kind)
        pre = conv2d(x, block.conv, stride=block.stride).astype(np.float64)
        s, q = pre.sum(axis=(0, 2, 3)), (pre * pre).sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        sq = q if sq is None else sq + q
        count += pre.shape[0] * pre.shape[2] * pre.shape[3]
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0) * count / max(count - 1, 1)
    block.bn.running_mean[...] = mean
    block.bn.running_var[...] = var


__all__ = [
    "ActivationCache", "GreedyNet", "LayerTrainResult", "compute_cache", "ensemble_combine",
    "ensemble_predict", "ensemble_weights", "evaluate", "head_risk", "train_greedy", "train_layer",
]
