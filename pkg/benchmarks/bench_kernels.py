"""Numba vs pure-numpy timings for the radial kernels.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Both paths are called directly, so the result does not depend on
RADCAL_DISABLE_NUMBA. The first numba call (compilation) is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from radcal import kernels
from radcal.models import ModelKind, TargetModel, root_table


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n: int, rng):
    theta = rng.uniform(0.0, 1.6, n)
    table = root_table(TargetModel(ModelKind.DIV_EVEN, (-0.3, 0.01), 2.4))
    R = rng.uniform(0.0, 2.0, n)
    Z = rng.uniform(0.1, 1.0, n)
    p_kb = np.array([0.02, -0.004, 0.0005, 0.0])
    p_ds = np.array([-0.15, 0.58, 0.0, 0.0])
    z_grid = np.linspace(0.0, 1.5, 257)
    f_grid, _ = kernels.phi_np(kernels.KB, p_kb, np.sin(z_grid), np.cos(z_grid))
    r = rng.uniform(0.0, float(f_grid.max()), n)
    div = (theta, table.coeffs, table.seg_r, table.seg_w)
    return {
        "division_radius": (kernels.division_radius_nb, kernels.division_radius_np, div),
        "phi (kb)": (kernels.phi_nb, kernels.phi_np, (kernels.KB, p_kb, R, Z)),
        "phi (ds)": (kernels.phi_nb, kernels.phi_np, (kernels.DS, p_ds, R, Z)),
        "phi_inverse (kb)": (kernels.phi_inverse_nb, kernels.phi_inverse_np, (kernels.KB, p_kb, r, z_grid, f_grid)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'numba [ms]':>12}{'numpy [ms]':>12}{'speed-up':>10}  max |diff|")
    for name, (nb, npf, a) in cases(args.n, rng).items():
        out_nb = nb(*a)  # compile
        out_np = npf(*a)
        diff = np.nanmax(np.abs(out_nb[0] - out_np[0]))
        t_nb = best_of(lambda: nb(*a), args.repeat)
        t_np = best_of(lambda: npf(*a), args.repeat)
        print(f"{name:<20}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
