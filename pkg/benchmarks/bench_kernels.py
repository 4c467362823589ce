"""Compiled vs pure-numpy kernels on oracle- and k-means-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints median wallclock per call for each backend and the max absolute
difference between their outputs.
"""

import argparse
import statistics
import time

import numpy as np

from decentflow._kernels import implementations

CASES = {
    # (queries, points, dim)
    "oracle, toy latents": (64, 1024, 256),
    "oracle, small 2-d": (256, 256, 2),
    "oracle, one query": (1, 4096, 256),
    "k-means assign": (4096, 64, 256),
}


def _time(fn, repeat: int) -> float:
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = implementations()
    if "compiled" not in impls:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<22} {'kernel':<22} " + " ".join(f"{name:>12}" for name in impls) + "    max |diff|")
    for case, (q, n, d) in CASES.items():
        xs = rng.standard_normal((q, d))
        pts = rng.standard_normal((n, d))
        log_q = np.full(n, -np.log(n))
        t = 0.4
        calls = {
            "posterior_mean_batch": lambda m: m.posterior_mean_batch(xs, pts, log_q, 1.0 - t, t),
            "log_weights": lambda m: m.log_weights(xs[0].copy(), pts, log_q, 1.0 - t, t),
            "nearest_centroid": lambda m: m.nearest_centroid(xs, pts)[1],
        }
        for kernel, call in calls.items():
            times = [_time(lambda m=m: call(m), args.repeat) for m in impls.values()]
            outs = [np.asarray(call(m)) for m in impls.values()]
            diff = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
            cells = " ".join(f"{1e3 * s:>10.3f}ms" for s in times)
            print(f"{case:<22} {kernel:<22} {cells}    {diff:.1e}")


if __name__ == "__main__":
    main()
