import struct

import numpy as np
import pytest

from layerwise.checkpoint import MAGIC, VERSION, from_bytes, load_checkpoint, parse_header, save_checkpoint, to_bytes
from layerwise.config import TrainConfig
from layerwise.data import LabeledDataset
from layerwise.errors import CheckpointError
from layerwise.trainer import block_state, head_state, train_greedy


def _net(rng, **kw):
    base = dict(layers=2, k=2, width=4, aux_width=6, downsample=(1,), augment=False, epochs_per_layer=1,
                batch_size=8, dataset="mnist", class_count=3, batchnorm="both")
    base.update(kw)
    images = rng.standard_normal((12, 1, 12, 12)).astype(np.float32)
    ds = LabeledDataset(images, np.arange(12) % 3, "train", 3)
    return train_greedy(ds, TrainConfig(**base), rng=np.random.default_rng(0))[0], images


def _same(a, b):
    assert a.depth == b.depth and a.config == b.config and a.history == b.history
    for j in range(a.depth):
        for sa, sb in ((block_state(a.blocks[j]), block_state(b.blocks[j])),
                       (head_state(a.heads[j]), head_state(b.heads[j]))):
            assert sa.keys() == sb.keys()
            assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_roundtrip_is_byte_identical(rng, tmp_path):
    net, images = _net(rng)
    save_checkpoint(net, tmp_path / "c.lw")
    loaded = load_checkpoint(tmp_path / "c.lw")
    _same(net, loaded)
    assert to_bytes(loaded) == (tmp_path / "c.lw").read_bytes()
    assert np.array_equal(net.logits(images, 1), loaded.logits(images, 1))


def test_directory_resolves_to_default_name(rng, tmp_path):
    net, _ = _net(rng, batchnorm="none", k=1)
    save_checkpoint(net, tmp_path / "checkpoint.lw")
    assert load_checkpoint(tmp_path).depth == 2


def test_header_records_channel_order(rng):
    net, _ = _net(rng)
    header, _ = parse_header(to_bytes(net))
    assert header["channel_order"] == "TL,TR,BL,BR"
    assert [layer["downsample"] for layer in header["layers"]] == [False, True]


def test_corrupted_byte_fails_checksum(rng):
    raw = bytearray(to_bytes(_net(rng)[0]))
    raw[len(raw) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(raw))


def test_version_and_magic_checked(rng):
    raw = to_bytes(_net(rng)[0])
    _, _, hlen = struct.unpack_from("<8sIQ", raw)
    bumped = struct.pack("<8sIQ", MAGIC, VERSION + 1, hlen) + raw[20:]
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bumped)
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTALAYR" + raw[8:])
    with pytest.raises(CheckpointError):
        from_bytes(raw[:10])


def test_pruned_shapes_survive_roundtrip(rng, tmp_path):
    from layerwise.compression import prune_block, prune_head_input

    net, images = _net(rng, layers=1, downsample=())
    keep = np.array([0, 2, 3])
    net.blocks[0] = prune_block(net.blocks[0], keep)
    net.heads[0] = prune_head_input(net.heads[0], keep)
    save_checkpoint(net, tmp_path / "p.lw")
    loaded = load_checkpoint(tmp_path / "p.lw")
    assert loaded.blocks[0].out_width == 3
    assert np.array_equal(net.logits(images, 0), loaded.logits(images, 0))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.lw")
