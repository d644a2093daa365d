"""Compare the compiled and numpy discretized-logistic kernels.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from ratpad import _kernels_py

try:
    from ratpad import _kernels
except ImportError:
    _kernels = None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    v = rng.integers(0, 256, args.n).astype(np.uint8)
    mu = rng.uniform(-1.2, 1.2, args.n)
    ls = rng.uniform(-6, 1, args.n)

    backends = {"numpy": _kernels_py.logistic_logprob}
    if _kernels is not None:
        backends["cython"] = _kernels.logistic_logprob
    else:
        print("compiled extension not built; timing numpy only")

    ref = None
    for name, fn in backends.items():
        for grad in (False, True):
            t = min(timeit.repeat(lambda: fn(v, mu, ls, grad), number=1, repeat=args.repeat))
            print(f"{name:7s} grad={grad!s:5s} {t * 1e3:8.2f} ms  {args.n / t / 1e6:7.1f} M/s")
        out = fn(v, mu, ls, True)
        if ref is None:
            ref = out
        else:
            diff = max(float(np.max(np.abs(a - b))) for a, b in zip(ref, out))
            print(f"max |numpy - {name}| = {diff:.3g}")


if __name__ == "__main__":
    main()
