"""Self-describing binary checkpoints for :class:`~layerwise.trainer.GreedyNet`.

Layout::

    magic    8 bytes   b"LAYERWSE"
    version  uint32 LE
    hlen     uint64 LE
    header   hlen bytes of UTF-8 JSON (sorted keys)
    tensors  float32 little-endian, in header table order
    crc32    uint32 LE over everything before it

The header holds the config snapshot, the invertible-downsampling channel
order, the per-layer structure, each tensor's name/shape/offset and the
per-layer training summaries.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .architecture import CHANNEL_ORDER, AuxHead, LayerBlock
from .errors import CheckpointError
from .numerics import BatchNormParams, ConvParams, LinearParams

MAGIC = b"LAYERWSE"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _layer_tensors(j, block: LayerBlock, head: AuxHead):
    out = [(f"block{j}.conv.kernel", block.conv.kernel), (f"block{j}.conv.bias", block.conv.bias)]
    if block.bn is not None:
        out += _bn_tensors(f"block{j}.bn", block.bn)
    for i, conv in enumerate(head.convs):
        out += [(f"head{j}.aux{i}.kernel", conv.kernel), (f"head{j}.aux{i}.bias", conv.bias)]
        if head.bns is not None:
            out += _bn_tensors(f"head{j}.auxbn{i}", head.bns[i])
    out += [(f"head{j}.linear.weight", head.linear.weight), (f"head{j}.linear.bias", head.linear.bias)]
    return out


def _bn_tensors(prefix, bn):
    return [(f"{prefix}.{name}", getattr(bn, name)) for name in ("scale", "shift", "running_mean", "running_var")]


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def to_bytes(net) -> bytes:
    table, chunks, offset = [], [], 0
    layers = []
    for j, (block, head) in enumerate(zip(net.blocks, net.heads)):
        layers.append({
            "downsample": block.downsample,
            "downsample_kind": block.downsample_kind,
            "batchnorm": block.bn is not None,
            "bn_eps": block.bn.eps if block.bn is not None else None,
            "k": head.k,
            "head_batchnorm": head.bns is not None,
            "head_bn_eps": head.bns[0].eps if head.bns else None,
            "pre_pool": head.pre_pool,
        })
        for name, arr in _layer_tensors(j, block, head):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = {
        "format": "layerwise-greedynet",
        "channel_order": CHANNEL_ORDER,
        "dtype": "float32-le",
        "config": _jsonable(net.config.to_dict()),
        "normalization": _jsonable(net.normalization),
        "layers": layers,
        "history": _jsonable(net.history),
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net, path):
    """Atomically write ``net`` to ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(to_bytes(net))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def parse_header(raw: bytes):
    if len(raw) < _PREFIX.size + 4:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("channel_order") != CHANNEL_ORDER:
        raise CheckpointError(f"unsupported channel order {header.get('channel_order')!r}")
    return header, raw[start + hlen:-4]


def from_bytes(raw: bytes):
    from .config import TrainConfig
    from .trainer import GreedyNet

    header, data = parse_header(raw)
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + 4 * count
        if end > len(data):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])

    def bn(prefix, eps):
        return BatchNormParams(*(tensors[f"{prefix}.{n}"] for n in ("scale", "shift", "running_mean", "running_var")), eps=eps)

    net = GreedyNet(TrainConfig.from_dict(header["config"]), normalization=header["normalization"],
                    history=header["history"])
    for j, info in enumerate(header["layers"]):
        conv = ConvParams(tensors[f"block{j}.conv.kernel"], tensors[f"block{j}.conv.bias"])
        block_bn = bn(f"block{j}.bn", info["bn_eps"]) if info["batchnorm"] else None
        net.blocks.append(LayerBlock(conv, info["downsample"], info["downsample_kind"], block_bn))
        convs = [ConvParams(tensors[f"head{j}.aux{i}.kernel"], tensors[f"head{j}.aux{i}.bias"]) for i in range(info["k"] - 1)]
        bns = [bn(f"head{j}.auxbn{i}", info["head_bn_eps"]) for i in range(info["k"] - 1)] if info["head_batchnorm"] else None
        lin = LinearParams(tensors[f"head{j}.linear.weight"], tensors[f"head{j}.linear.bias"])
        net.heads.append(AuxHead(info["k"], convs, lin, bns, info["pre_pool"]))
    return net


def load_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.lw"
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
