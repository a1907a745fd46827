"""Compare the compiled and numpy forward kernels on model-sized workloads.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from cardioxnet import kernels
from cardioxnet.layers import INFER
from cardioxnet.model import ModelConfig, build_model

CASES = {
    # name: (function, args factory)
    "conv1d ffe-first (16x1x2250, k=2250 s=1000)": (
        "conv1d_valid", lambda r: (r.standard_normal((16, 1, 4250)), r.standard_normal((16, 1, 2250)),
                                   r.standard_normal(16), 1000)),
    "conv1d pe-stack (16x32x18, k=5)": (
        "conv1d_valid", lambda r: (r.standard_normal((16, 32, 22)), r.standard_normal((32, 32, 5)),
                                   r.standard_normal(32), 1)),
    "conv1d small-first (16x1x2250, k=64 s=16)": (
        "conv1d_valid", lambda r: (r.standard_normal((16, 1, 2298)), r.standard_normal((8, 1, 64)),
                                   r.standard_normal(8), 16)),
    "conv2d afe (16x1x47x52, 3x3, 8ch)": (
        "conv2d_valid", lambda r: (r.standard_normal((16, 1, 47, 52)), r.standard_normal((8, 1, 3, 3)),
                                   r.standard_normal(8), 1, 1)),
    "maxpool1d (16x16x3000, w=2)": (
        "maxpool1d_valid", lambda r: (r.standard_normal((16, 16, 3000)), 2, 2)),
    "maxpool2d (16x8x46x50, 2x2)": (
        "maxpool2d_valid", lambda r: (r.standard_normal((16, 8, 46, 50)), 2, 2, 2, 2)),
}


def _time(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(samples))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"{'case':48}" + "".join(f"{b:>12}" for b in backends) + "   speedup")
    for name, (fname, make) in CASES.items():
        inputs = make(rng)
        ms = {b: _time(lambda: getattr(kernels.get(b), fname)(*inputs), args.repeats) for b in backends}
        speed = f"{ms['python'] / ms['cython']:8.2f}x" if "cython" in ms else "       -"
        print(f"{name:48}" + "".join(f"{ms[b]:10.3f}ms" for b in backends) + "  " + speed)

    x = np.random.default_rng(1).uniform(-1, 1, (16, 2250))
    for preset in ("default", "small"):
        model = build_model(ModelConfig.preset(preset), 0)
        row = {}
        for b in backends:
            kernels.set_backend(b)
            row[b] = _time(lambda: model.forward(x, INFER), max(3, args.repeats // 3))
        speed = f"{row['python'] / row['cython']:8.2f}x" if "cython" in row else "       -"
        print(f"{'model forward ' + preset + ' (batch 16)':48}"
              + "".join(f"{row[b]:10.3f}ms" for b in backends) + "  " + speed)


if __name__ == "__main__":
    main()
