"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_backends.py [--repeat 3] [--threads 1] [--quick]

Prints one row per workload with the best-of-``repeat`` wall time of each
backend and the speedup.  Both backends produce the same numbers (see
tests/test_backends.py), so only time is compared.
"""
import argparse
import time

import numpy as np

from sfpe import _backend, build
from sfpe.grid import GridFunction, GridSpec
from sfpe.sde import BrownianDriver, simulate
from sfpe.solver import McConfig, apply_phi


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(scale):
    bm = build({"family": "brownian", "d": 2, "T": 1.0, "f": "0", "g": "norm2", "L": 1.0})
    ou = build({"family": "ou-truncated", "d": 2, "T": 1.0, "f": "0", "g": "norm2", "L": 1.0})
    lin = build({"family": "ou", "d": 1, "T": 1.0, "f": "v * exp(-t) + sin(x1)", "g": "norm2", "L": 1.0})
    n = int(20000 * scale)
    spec = GridSpec(1.0, 5, (-3.0,), (3.0,), (11,))
    v = GridFunction.from_function(spec, lambda t, x: np.cos(x[:, 0]))
    mc = McConfig(max(100, int(2000 * scale)), 50, seed=1)
    return [
        (f"simulate brownian d=2, {n} paths x 100 steps",
         lambda b, th: simulate(bm, 0.0, [0.0, 0.0], 100, n, BrownianDriver(1), record=False, backend=b, threads=th)),
        (f"simulate truncated OU d=2, {n} paths x 100 steps",
         lambda b, th: simulate(ou, 0.0, [0.0, 0.0], 100, n, BrownianDriver(1), record=False, backend=b, threads=th)),
        (f"apply_phi f(v) d=1, 55 nodes x {mc.n_paths} paths x 50 steps",
         lambda b, th: apply_phi(lin, v, mc, backend=b, threads=th)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    args = ap.parse_args(argv)
    backends = [b for b in ("cython", "python") if b in _backend.available()]
    scale = 0.1 if args.quick else 1.0
    print(f"{'workload':58s} " + " ".join(f"{b:>10s}" for b in backends) + "    speedup")
    for name, fn in workloads(scale):
        times = [_best(lambda: fn(b, args.threads), args.repeat) for b in backends]
        row = f"{name:58s} " + " ".join(f"{t:9.3f}s" for t in times)
        if len(times) == 2:
            row += f"   {times[1] / times[0]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
