# cython: language_level=3
"""Compiled 3x3 patch gather/scatter used by the convolution kernels.

Both routines visit kernel offsets in (channel, row, col) order so that the
scatter-add in ``col2im`` accumulates each input pixel in exactly the same
order as the numpy fallback; the two backends are bit-identical.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int pad, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - 3) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - 3) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * 9, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(3):
                    for kj in range(3):
                        row = ch * 9 + ki * 3 + kj
                        for oy in range(oh):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                for ox in range(ow):
                                    cols[b, row, oy * ow + ox] = 0
                                continue
                            for ox in range(ow):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    cols[b, row, oy * ow + ox] = 0
                                else:
                                    cols[b, row, oy * ow + ox] = x[b, ch, iy, ix]
    return out


def col2im(real[:, :, ::1] cols, tuple shape, int pad, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - 3) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - 3) // stride + 1
    if cols.shape[0] != n or cols.shape[1] != c * 9 or cols.shape[2] != oh * ow:
        raise ValueError(f"cols shape ({cols.shape[0]}, {cols.shape[1]}, {cols.shape[2]}) does not match image shape {shape}")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(3):
                    for kj in range(3):
                        row = ch * 9 + ki * 3 + kj
                        for oy in range(oh):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + kj - pad
                                if ix >= 0 and ix < w:
                                    img[b, ch, iy, ix] += cols[b, row, oy * ow + ox]
    return out


def matmul_ordered(real[:, ::1] a, real[:, :, ::1] b):
    """``a @ b[i]`` for each ``i``, summing over the shared axis strictly in index order.

    Zero terms leave every partial sum unchanged, so dropping them (e.g.
    pruned dead channels) gives bit-identical results.
    """
    cdef Py_ssize_t n = b.shape[0], m = a.shape[0], kk = a.shape[1], p = b.shape[2]
    if b.shape[1] != kk:
        raise ValueError(f"inner dimensions differ: {kk} vs {b.shape[1]}")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, m, p), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t s, i, k, j
    cdef real coef
    with nogil:
        for s in range(n):
            for i in range(m):
                for k in range(kk):
                    coef = a[i, k]
                    for j in range(p):
                        o[s, i, j] = o[s, i, j] + coef * b[s, k, j]
    return out
