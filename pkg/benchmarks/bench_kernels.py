"""Time the compiled and pure-Python kernel backends on round-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from fedorgp import kernels


def cases(rng, n, k, c):
    A = rng.standard_normal((n, k))
    P = rng.standard_normal((c, k))
    labels = rng.integers(0, c, n)
    R = rng.standard_normal((n, k))
    U = rng.standard_normal((n, k))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    mask = rng.random(n) < 0.9
    return {
        "cosine_matrix": lambda: kernels.cosine_matrix(A, P),
        "or_loss_grad": lambda: kernels.or_loss_grad(A, labels, P, 1.0, 10.0),
        "alignment_grad": lambda: kernels.alignment_grad(R, U, mask),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    shapes = [(32, 64, 10), (256, 64, 10), (32, 512, 100)]
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.backend()})")
    print(f"{'kernel':<16} {'shape (n,K,C)':<16}" + "".join(f"{b + ' us':>14}" for b in backends) + f"{'speedup':>10}")
    prev = kernels.backend()
    try:
        for shape in shapes:
            fns = cases(rng, *shape)
            for name, fn in fns.items():
                timings = {}
                for b in backends:
                    kernels.use_backend(b)
                    fn()
                    timings[b] = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat * 1e6
                speed = timings["python"] / timings["compiled"] if "compiled" in timings else float("nan")
                print(f"{name:<16} {str(shape):<16}" + "".join(f"{timings[b]:>14.2f}" for b in backends)
                      + f"{speed:>9.2f}x")
    finally:
        kernels.use_backend(prev)


if __name__ == "__main__":
    main()
