#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Run from the repository root after installing the package:

    python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import time

import numpy as np

from graspwarp._kernels import _numpy_impl

try:
    from graspwarp._kernels import _core as _compiled
except ImportError:
    _compiled = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(label, make_args, call, repeats):
    args = make_args()
    t_py = _time(lambda: call(_numpy_impl, *args), repeats)
    row = f"{label:<44s} python {t_py * 1e3:9.2f} ms"
    if _compiled is not None:
        t_c = _time(lambda: call(_compiled, *args), repeats)
        row += f"   compiled {t_c * 1e3:9.2f} ms   speedup {t_py / t_c:6.2f}x"
    print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller sizes, fewer repeats")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    repeats = 3 if args.quick else 5
    m, n = (600, 700) if args.quick else (1500, 1800)
    rays, tris = (20_000, 150) if args.quick else (80_000, 300)

    a = np.ascontiguousarray(rng.normal(size=(m, 3)) * 0.2)
    b = np.ascontiguousarray(rng.normal(size=(n, 3)) * 0.2)

    verts = np.ascontiguousarray(rng.normal(size=(tris + 2, 3)))
    faces = np.ascontiguousarray(
        np.column_stack(
            [np.arange(tris), np.arange(tris) + 1, np.arange(tris) + 2]
        ).astype(np.int64)
    )
    origins = np.ascontiguousarray(rng.normal(size=(rays, 3)) * 5.0)
    dirs = rng.normal(size=(rays, 3))
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))

    if _compiled is None:
        print("compiled kernels not built; timing the python fallback only")
    print(f"sizes: template {m}, reference {n}, rays {rays}, triangles {tris}\n")

    bench(f"kernel_matrix {m}x{n}", lambda: (a, b, 0.4),
          lambda impl, *s: impl.kernel_matrix(*s), repeats)
    bench(f"posteriors {m}x{n}", lambda: (a, b, 1e-3, 1e-4),
          lambda impl, *s: impl.posteriors(*s), repeats)
    bench(f"mixture_energy_grad {m}x{n} (model outer)", lambda: (a, b, 1e-3, True),
          lambda impl, *s: impl.mixture_energy_grad(*s), repeats)
    bench(f"mixture_energy_grad {m}x{n} (data outer)", lambda: (a, b, 1e-3, False),
          lambda impl, *s: impl.mixture_energy_grad(*s), repeats)
    bench(f"raycast_first_hit {rays} rays x {tris} tris",
          lambda: (origins, dirs, verts, faces),
          lambda impl, *s: impl.raycast_first_hit(*s), repeats)


if __name__ == "__main__":
    main()
