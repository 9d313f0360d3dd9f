"""Time the compiled patch kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from layerwise import _fallback

try:
    from layerwise import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((64, 32, 16, 16)).astype(np.float32)
    cols = _fallback.im2col(x, 1, 1)
    a = rng.standard_normal((32, 32 * 9)).astype(np.float32)
    return [
        ("im2col 64x32x16x16", lambda m: m.im2col(x, 1, 1)),
        ("col2im 64x32x16x16", lambda m: m.col2im(cols, x.shape, 1, 1)),
        ("matmul_ordered 32x288 @ 64x288x256", lambda m: m.matmul_ordered(a, cols)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("numpy", _fallback)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':40s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn in cases(rng):
        times = []
        for _, mod in backends:
            fn(mod)  # warm-up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        if len(times) == 2:
            ref, fast = fn(_fallback), np.asarray(fn(_ckernels))
            assert np.array_equal(ref, fast), f"{label}: backends disagree"
        speed = f"{times[0] / times[1]:10.2f}x" if len(times) == 2 else "  (no compiled backend)"
        print(f"{label:40s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
