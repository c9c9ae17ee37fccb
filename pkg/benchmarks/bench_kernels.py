"""Timing comparison of the compiled kernels against the pure-python ones.

Run as a script:  python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on a realistic workload (2048-point clouds, 128x128
images, size-55 geodesic fronts).  The reference backend is the same code
the package falls back to when the extension is unavailable, so the table
doubles as a sanity check that both agree on the outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from semkp._kernels import get_backend
from semkp.graph import build_knn_graph
from semkp.synth import SyntheticShapeSpec, generate_shape


def _timeit(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_workloads():
    cloud, _ = generate_shape(SyntheticShapeSpec("table", seed=5))
    graph = build_knn_graph(cloud.points, 8)
    rng = np.random.default_rng(5)
    qx = rng.uniform(0, 128, size=2048)
    qy = rng.uniform(0, 128, size=2048)
    depth = rng.uniform(1.0, 3.0, size=2048)
    upstream = rng.normal(size=(128, 128))
    return {
        "geodesic_from": lambda k: k.geodesic_from(
            graph.indptr, graph.indices, graph.weights, 0, 55),
        "geodesic_all": lambda k: k.geodesic_all(
            graph.indptr, graph.indices, graph.weights, 55),
        "splat_forward": lambda k: k.splat_forward(qx, qy, 128, 128, 2.0),
        "splat_backward": lambda k: k.splat_backward(upstream, qx, qy, 2.0),
        "zbuffer_points": lambda k: k.zbuffer_points(qx, qy, depth, 128, 128, 2.4),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3,
                        help="repetitions per kernel; best time wins")
    args = parser.parse_args()

    backends = {}
    for name in ("python", "compiled"):
        try:
            backends[name] = get_backend(name)
        except ImportError:
            print(f"backend {name!r} unavailable, skipping")
    workloads = build_workloads()

    print(f"{'kernel':<16}" + "".join(f"{n:>14}" for n in backends) + f"{'speedup':>10}")
    for kernel, call in workloads.items():
        times = {n: _timeit(lambda b=b: call(b), args.repeat)
                 for n, b in backends.items()}
        row = f"{kernel:<16}" + "".join(f"{times[n] * 1e3:>12.2f}ms" for n in times)
        if len(times) == 2:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
