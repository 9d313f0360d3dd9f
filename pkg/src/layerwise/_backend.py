"""Selects the compiled patch kernels when importable, else the numpy ones.

Set ``LAYERWISE_BACKEND=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
im2col = _fallback.im2col
col2im = _fallback.col2im
matmul_ordered = _fallback.matmul_ordered

if os.environ.get("LAYERWISE_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im
        matmul_ordered = _ckernels.matmul_ordered
