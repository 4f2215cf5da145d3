"""Compare the compiled and numpy kernel backends on desk-scale shapes.

Usage: python benchmarks/bench_kernels.py [--repeat N]
Prints one line per kernel with the best-of-N time for each backend, the
speedup, and whether the two outputs are bit-identical.
"""

import argparse
import timeit

import numpy as np

from hdcnn.kernels import compiled_available, get_backend


def cases(rng):
    x = rng.normal(size=(64, 8, 14, 14))
    cols = get_backend("python").im2col(x, 5, 5, 1, 2)
    pool_in = rng.normal(size=(64, 16, 14, 14))
    _, arg = get_backend("python").maxpool_forward(pool_in, 2, 2)
    dy = rng.normal(size=(64, 16, 7, 7))
    sym = rng.normal(size=(48, 48))
    sym = sym + sym.T
    idx = rng.integers(0, 16, size=(16, 50), dtype=np.uint8)
    centers = rng.normal(size=(16, 200)).astype(np.float32)
    feats = rng.normal(size=(200, 64))
    return {
        "im2col": lambda k: k.im2col(x, 5, 5, 1, 2),
        "col2im": lambda k: k.col2im(cols, x.shape, 5, 5, 1, 2),
        "maxpool_forward": lambda k: k.maxpool_forward(pool_in, 2, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(dy, arg, pool_in.shape, 2, 2),
        "jacobi_eigh": lambda k: k.jacobi_eigh(sym, 1e-12, 100),
        "pq_lookup": lambda k: k.pq_lookup(idx, centers, feats),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    py, cy = get_backend("python"), get_backend("cython")
    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x  {same(fn(py), fn(cy))}")


if __name__ == "__main__":
    main()
