"""Merton price vs minimal-variance price over two parameter grids:
(lambda, mu) and (sigma, delta), with s0=1, K=0.5, T=1 and the remaining
parameters at the benchmark Merton values.

    python3 scripts/price_surfaces.py --out-dir results
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from qhedge.pricing import price_surface

BASE = dict(alpha0=0.2, sigma0=0.2, lam=5.0, mu=-0.2, delta=0.05)
GRIDS = {
    "lambda_mu": ("lam", np.linspace(0.0, 10.0, 11), "mu", np.linspace(-0.5, 0.5, 11)),
    "sigma_delta": ("sigma0", np.linspace(0.05, 0.5, 10), "delta", np.linspace(0.005, 0.2, 10)),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--M", type=int, default=10**5, help="Monte-Carlo paths per cell (default %(default)s)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--points", type=int, default=0, help="override the number of points per axis")
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args(argv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (p1, v1, p2, v2) in GRIDS.items():
        if args.points:
            v1 = np.linspace(v1[0], v1[-1], args.points)
            v2 = np.linspace(v2[0], v2[-1], args.points)
        rows = price_surface(p1, v1, p2, v2, BASE, M=args.M, seed=args.seed, mv_route="mc")
        with open(out / f"surface_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param1", "param2", "price_merton", "price_mv", "diff"])
            w.writerows([[f"{x:.6g}" for x in r[:2]] + [f"{x:.6f}" for x in r[2:]] for r in rows])


if __name__ == "__main__":
    main()
