import numpy as np
import pytest

from layerwise.architecture import build_network
from layerwise.config import TrainConfig, from_preset
from layerwise.data import LabeledDataset, MetricsWriter, read_metrics
from layerwise.errors import ConfigError, NumericError
from layerwise.numerics import softmax
from layerwise.trainer import (
    GreedyNet,
    block_state,
    compute_cache,
    ensemble_combine,
    ensemble_predict,
    ensemble_weights,
    evaluate,
    topk_accuracy,
    train_greedy,
    train_layer,
)


def _tiny_cfg(**kw):
    base = dict(layers=2, k=1, width=4, aux_width=4, downsample=(), input_downsample=True, augment=False,
                epochs_per_layer=2, batch_size=16, lr=0.05, lr_period=5, dataset="mnist")
    base.update(kw)
    return TrainConfig(**base)


def _blobs(rng, n=64, size=8, classes=2):
    labels = np.arange(n) % classes
    images = rng.standard_normal((n, 1, size, size)).astype(np.float32) * 0.1
    images[labels == 1, :, : size // 2] += 2.0
    return LabeledDataset(images, labels.astype(np.int64), "train", classes)


def test_compute_cache_zero_layers_is_prepared_input(rng):
    ds = _blobs(rng)
    net = GreedyNet(_tiny_cfg())
    cache = compute_cache(ds.images, net)
    assert cache.shape == (64, 4, 4, 4)
    assert np.array_equal(cache.data, net.prepare(ds.images))


def test_cache_matches_recompute_and_disk_mode(rng, tmp_path):
    ds = _blobs(rng)
    cfg = _tiny_cfg(class_count=2)
    net, _ = train_greedy(ds, cfg, rng=np.random.default_rng(0))
    mem = compute_cache(ds.images, net, batch=7)
    disk = compute_cache(ds.images, net, mode="disk", cache_dir=tmp_path, batch=64)
    assert np.array_equal(mem.data, disk.data)
    assert np.array_equal(mem.data, net.features(ds.images, 2, batch=64))
    mem.verify(net)
    disk.release()
    assert not any(tmp_path.iterdir())


def test_cache_fingerprint_mismatch(rng):
    ds = _blobs(rng)
    net, _ = train_greedy(ds, _tiny_cfg(class_count=2, layers=1), rng=np.random.default_rng(0))
    cache = compute_cache(ds.images, net)
    net.blocks[0].conv.kernel[0, 0, 0, 0] += 1
    with pytest.raises(ConfigError, match="does not match"):
        cache.verify(net)


def test_cache_shapes_follow_network_spec(rng):
    cfg = TrainConfig(layers=3, width=4, aux_width=4, downsample=(2,), epochs_per_layer=0, augment=False)
    images = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
    ds = LabeledDataset(images, np.array([0, 1, 2]), "train", 10)
    net, _ = train_greedy(ds, cfg, rng=np.random.default_rng(0))
    spec = build_network(cfg)
    for depth in range(4):
        shape = compute_cache(images, net, depth).shape[1:]
        if depth == 0:
            assert shape == (12, 16, 16)
        else:
            b = spec.blocks[depth - 1]
            assert shape == (b.out_width,) + b.spatial_out


def test_separable_two_class_reaches_full_accuracy(rng):
    ds = _blobs(rng)
    net, results = train_greedy(ds, _tiny_cfg(layers=1, class_count=2, epochs_per_layer=5), rng=np.random.default_rng(1))
    assert results[0].train_acc == 100.0


def test_best_along_trajectory_is_returned(rng):
    ds = _blobs(rng)
    net, results = train_greedy(ds, _tiny_cfg(class_count=2, epochs_per_layer=4), rng=np.random.default_rng(2))
    for r in results:
        risks = [c["train_risk"] for c in r.candidates]
        assert r.train_risk == min(risks)
        assert risks.index(min(risks)) == r.best_index
        from layerwise.trainer import head_risk

        cache = compute_cache(ds.images, GreedyNet(net.config, net.blocks[: r.layer]))
        assert head_risk(r.block, r.head, cache.data, ds.labels)[0] == r.train_risk


def test_frozen_layers_bit_identical(rng):
    ds = _blobs(rng)
    cfg = _tiny_cfg(class_count=2, layers=1)
    net, _ = train_greedy(ds, cfg, rng=np.random.default_rng(0))
    before = {k: v.copy() for k, v in block_state(net.blocks[0]).items()}
    cache = compute_cache(ds.images, net)
    train_layer(net, cache, ds.labels, cfg.replace(layers=2), np.random.default_rng(1))
    after = block_state(net.blocks[0])
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_single_layer_equals_shallow_training(rng):
    ds = _blobs(rng)
    cfg = _tiny_cfg(class_count=2, layers=1)
    net, results = train_greedy(ds, cfg, rng=np.random.default_rng(4))
    r = np.random.default_rng(4)
    direct = train_layer(GreedyNet(cfg), compute_cache(ds.images, GreedyNet(cfg)), ds.labels, cfg, r)
    assert direct.train_risk == results[0].train_risk


def test_identity_candidate_gives_constant_chain_with_zero_epochs(rng):
    ds = _blobs(rng)
    net, results = train_greedy(ds, _tiny_cfg(class_count=2, layers=3, epochs_per_layer=0), rng=np.random.default_rng(0))
    assert [r.identity_applicable for r in results] == [False, True, True]
    assert results[0].train_risk == results[1].train_risk == results[2].train_risk


def test_identity_candidate_skipped_on_downsampling(rng):
    ds = _blobs(rng, size=16)
    cfg = _tiny_cfg(class_count=2, layers=2, downsample=(1,), epochs_per_layer=0)
    _, results = train_greedy(ds, cfg, rng=np.random.default_rng(0))
    assert not results[1].identity_applicable


def test_divergence_raises_numeric_error(rng):
    ds = _blobs(rng)
    with pytest.raises(NumericError, match="diverged"):
        train_greedy(ds, _tiny_cfg(class_count=2, lr=1e30, momentum=0.0), rng=np.random.default_rng(0))


def test_partial_checkpoint_on_failure(rng, tmp_path):
    from layerwise.checkpoint import load_checkpoint

    ds = _blobs(rng)
    cfg = _tiny_cfg(class_count=2, layers=2)
    import layerwise.trainer as tr

    original = tr.train_layer

    def flaky(net, *a, **kw):
        if net.depth == 1:
            raise NumericError("boom")
        return original(net, *a, **kw)

    tr.train_layer = flaky
    try:
        with pytest.raises(NumericError):
            train_greedy(ds, cfg, checkpoint_path=tmp_path / "c.lw", rng=np.random.default_rng(0))
    finally:
        tr.train_layer = original
    assert load_checkpoint(tmp_path / "c.lw").depth == 1


def test_determinism_of_metrics_stream(rng, tmp_path):
    ds = _blobs(rng)
    cfg = _tiny_cfg(class_count=2, augment=True)
    for name in ("a", "b"):
        train_greedy(ds, cfg, test=ds, writer=MetricsWriter(tmp_path / f"{name}.jsonl"), run_id="x",
                     rng=np.random.default_rng(9))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    recs = read_metrics(tmp_path / "a.jsonl")
    epochs = [(r["layer"], r["epoch"]) for r in recs if r["kind"] == "epoch"]
    assert epochs == sorted(epochs) and len(epochs) == 2 * 3


def test_metrics_replay_reconstructs_best_risk(rng, tmp_path):
    ds = _blobs(rng)
    _, results = train_greedy(ds, _tiny_cfg(class_count=2), writer=MetricsWriter(tmp_path / "m.jsonl"),
                              rng=np.random.default_rng(0))
    recs = read_metrics(tmp_path / "m.jsonl")
    for r in results:
        risks = [x["train_loss"] for x in recs if x["kind"] == "epoch" and x["layer"] == r.layer]
        assert min(risks) == r.train_risk


# -- evaluation --


def test_topk():
    logits = np.array([[0.1, 0.9, 0.0], [0.5, 0.2, 0.3], [0.0, 0.1, 1.0]])
    top1, top2 = topk_accuracy(logits, np.array([1, 2, 0]), ks=(1, 2))
    assert top1 == pytest.approx(100 / 3) and top2 == pytest.approx(200 / 3)


def test_chance_level_and_top5_ge_top1(rng):
    labels = rng.integers(0, 10, 1000)
    logits = rng.standard_normal((1000, 10)) * 1e-3
    top1, top5 = topk_accuracy(logits, labels)
    assert abs(top1 - 10) <= 3 and top5 >= top1


def test_memorization_toy_set(rng):
    ds = _blobs(rng, n=16)
    net, _ = train_greedy(ds, _tiny_cfg(class_count=2, layers=1, epochs_per_layer=8), rng=np.random.default_rng(0))
    assert evaluate(net, ds.images, ds.labels, 0)[0] == 100.0


def test_evaluate_via_cache_equals_full_forward(rng):
    ds = _blobs(rng)
    net, _ = train_greedy(ds, _tiny_cfg(class_count=2), rng=np.random.default_rng(0))
    cache = compute_cache(ds.images, net, 1)
    full = net.logits(ds.images, 1)
    via = net.heads[1].forward(net.blocks[1].forward(cache.data)[0])[0]
    assert np.array_equal(full, via)
    assert evaluate(net, ds.images, ds.labels, 1) == evaluate(net, None, ds.labels, 1, cache=cache)


def test_ensemble_weights_and_combination(rng):
    assert ensemble_weights(3) == [2.0, 4.0, 8.0]
    p = rng.standard_normal((5, 10))
    z = ensemble_combine([p, p, p], "logit")
    assert np.allclose(z, 14 * p) and (z.argmax(1) == p.argmax(1)).all()
    single = ensemble_combine([p], "prob")
    assert (single.argmax(1) == p.argmax(1)).all()
    zs = [rng.standard_normal((5, 10)) for _ in range(3)]
    brute = 2 * softmax(zs[0]) + 4 * softmax(zs[1]) + 8 * softmax(zs[2])
    assert np.array_equal(ensemble_combine(zs), brute)
    with pytest.raises(ConfigError):
        ensemble_combine(zs, "mean")


def test_ensemble_predict_matches_layer_logits(rng):
    ds = _blobs(rng)
    net, _ = train_greedy(ds, _tiny_cfg(class_count=2), rng=np.random.default_rng(0))
    z = ensemble_predict(net, ds.images)
    brute = sum(2.0 ** (j + 1) * softmax(net.logits(ds.images, j)) for j in range(net.depth))
    assert np.array_equal(z, brute)


# -- desk-scale MNIST-5k run --


def test_mnist_first_layer_accuracy(mnist_run):
    net, results, _ = mnist_run
    assert results[0].test_acc >= 90.0


def test_mnist_deeper_layers_improve(mnist_run):
    _, results, _ = mnist_run
    assert results[2].test_acc > results[0].test_acc


def test_augmented_training_recomputes_frozen_prefix(mnist5k):
    train, test = mnist5k
    small = train.subset(256)
    cfg = from_preset("mnist-k1-reduced", augment=True, epochs_per_layer=1, layers=2)
    net, results = train_greedy(small, cfg)
    assert net.depth == 2 and np.isfinite(results[1].train_risk)
