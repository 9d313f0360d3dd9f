"""Pure-numpy patch gather/scatter, used when the compiled module is absent."""

import numpy as np


def _out_size(size, pad, stride):
    return (size + 2 * pad - 3) // stride + 1


def im2col(x, pad, stride):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, pad, stride), _out_size(w, pad, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    patches = [
        xp[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride]
        for ki in range(3)
        for kj in range(3)
    ]
    cols = np.stack(patches, axis=2)  # (n, c, 9, oh, ow)
    return np.ascontiguousarray(cols.reshape(n, c * 9, oh * ow))


def col2im(cols, shape, pad, stride):
    n, c, h, w = shape
    oh, ow = _out_size(h, pad, stride), _out_size(w, pad, stride)
    if cols.shape != (n, c * 9, oh * ow):
        raise ValueError(f"cols shape {cols.shape} does not match image shape {tuple(shape)}")
    cols = cols.reshape(n, c, 9, oh, ow)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            buf[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += (
                cols[:, :, ki * 3 + kj]
            )
    if pad:
        buf = buf[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(buf)


def matmul_ordered(a, b):
    """``a @ b[i]`` per sample with the inner sum taken strictly in index order."""
    if b.shape[1] != a.shape[1]:
        raise ValueError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    out = np.zeros((b.shape[0], a.shape[0], b.shape[2]), dtype=b.dtype)
    for k in range(a.shape[1]):
        out += a[None, :, k, None] * b[:, None, k, :]
    return out
