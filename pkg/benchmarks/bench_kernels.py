"""Time the numba kernels against their numpy twins.

Run ``python benchmarks/bench_kernels.py [--dims 32] [--K 4] [--m 10]``.
Prints one line per kernel with the median wall time of each path, the
speed-up, and the largest absolute difference between the two outputs.
"""

import argparse
import time

import numpy as np

from maternglm import _kernels
from maternglm.lattice import ball_mask, build_lattice


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--P", type=int, default=2)
    ap.add_argument("--m", type=int, default=10, help="columns per batched apply")
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is unavailable or disabled (MATERNGLM_NUMBA=0); nothing to compare")

    rng = np.random.default_rng(0)
    lat = build_lattice(ball_mask((args.dims,) * 3))
    n, kk, p = lat.N, args.K, args.P
    diag = rng.uniform(6.0, 7.0, n)
    w = np.array([1.0, 1.1, 0.9])
    v = rng.standard_normal((n, args.m))
    blocks = rng.standard_normal((n, kk, kk))
    x = rng.standard_normal((kk, n, args.m))
    xtx = rng.standard_normal((kk, kk))
    r = rng.standard_normal((p, kk, kk))
    s = rng.standard_normal((p, kk, kk, p))
    a = rng.uniform(-0.5, 0.5, (p, n))

    cases = [
        ("stencil_apply", _kernels.stencil_apply_np, (lat.nbr, diag, w, v)),
        ("block_apply", _kernels.block_apply_np, (blocks, x)),
        ("block_quadform", _kernels.block_quadform_np, (x, blocks, x)),
        ("assemble_blocks", _kernels.assemble_blocks_np, (xtx, r, s, a)),
    ]
    print(f"N={n} K={kk} P={p} m={args.m} repeat={args.repeat}")
    print(f"{'kernel':<17}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}{'max |diff|':>13}")
    for name, np_fn, fargs in cases:
        nb_fn = getattr(_kernels, name)
        nb_fn(*fargs)  # compile
        t_np = _median_time(lambda: np_fn(*fargs), args.repeat)
        t_nb = _median_time(lambda: nb_fn(*fargs), args.repeat)
        diff = float(np.max(np.abs(np_fn(*fargs) - nb_fn(*fargs))))
        print(f"{name:<17}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>10.1f}{diff:>13.2e}")


if __name__ == "__main__":
    main()
