"""Compare the compiled and NumPy pair-block kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--threads 1]

Prints the best wall time per call for each kernel, backend and problem
size, plus the speed-up of the compiled core over the fallback.
"""
import argparse
import timeit

import numpy as np

from mobml import _backend


def make_inputs(n_particles, n_configs, seed=0):
    rng = np.random.default_rng(seed)
    # lattice plus jitter keeps every pair separated
    side = int(np.ceil(n_particles ** (1 / 3)))
    grid = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3)[:n_particles]
    pos = 3.0 * grid + rng.uniform(-0.5, 0.5, size=(n_configs, n_particles, 3))
    return np.ascontiguousarray(pos)


def kernel_calls(pos, threads):
    radii = np.linspace(0.5, 40.0, 400)
    alpha, beta = 1 / radii, 0.5 / radii
    rng = np.random.default_rng(1)
    centers = rng.uniform(-10, 10, size=(32, 3))
    weights = rng.normal(size=(32, 6))
    return {
        "oseen_pairs": lambda k, out: k.oseen_pairs(pos, out, 1 / (8 * np.pi), 2.0, num_threads=threads),
        "table_pairs": lambda k, out: k.table_pairs(pos, out, radii, alpha, beta, num_threads=threads),
        "kernel_pairs": lambda k, out: k.kernel_pairs(pos, out, centers, weights, 3.0, num_threads=threads),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--sizes", type=int, nargs="+", default=[2, 8, 32, 128])
    ap.add_argument("--configs", type=int, default=64, help="configurations per call")
    args = ap.parse_args(argv)

    backends = _backend.AVAILABLE
    if "cython" not in backends:
        print("compiled core not built; timing the NumPy fallback only")
    print(f"{'kernel':<14}{'n':>6}" + "".join(f"{b + ' [ms]':>16}" for b in backends) + f"{'speed-up':>12}")
    for n in args.sizes:
        pos = make_inputs(n, args.configs)
        for name, call in kernel_calls(pos, args.threads).items():
            times = {}
            for b, k in backends.items():
                out = np.zeros((args.configs, 3 * n, 3 * n))
                number = max(1, int(0.05 / max(timeit.timeit(lambda: call(k, out), number=1), 1e-6)))
                best = min(timeit.repeat(lambda: call(k, out), number=number, repeat=args.repeat)) / number
                times[b] = best * 1e3
            ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<14}{n:>6}" + "".join(f"{times[b]:>16.4f}" for b in backends) + f"{ratio:>11.1f}x")


if __name__ == "__main__":
    main()
