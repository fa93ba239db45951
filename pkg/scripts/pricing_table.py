"""Reference prices for the benchmark parameter sets, written as CSV.

    python3 scripts/pricing_table.py --out results/pricing.csv
"""

import argparse
import csv
import math
import sys
from pathlib import Path

from qhedge import market as mk
from qhedge import pricing as pr


def rows(M: int, seed: int, cross_M: int):
    claim = pr.CallClaim(0.5, 1.0)
    merton = mk.merton_model()
    yield "bs", "closed form", pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5), 0.0
    bsmb = mk.bsmb_model()
    yield "bsmb", "closed form (total volatility)", pr.bs_price(0.0, 1.0, math.sqrt(bsmb.sigma_sq), 0.0, 1.0, 0.5), 0.0
    r = pr.mc_minimal_variance_price(bsmb, claim, M, seed)
    yield "bsmb", "E[F Z*] Monte Carlo", r.price, r.stderr
    yield "merton", "Merton series", pr.merton_price_model(merton, claim).price, 0.0
    yield "merton", "E[F Z*] series", pr.qstar_series_price(merton, claim).price, 0.0
    r = pr.mc_minimal_variance_price(merton, claim, M, seed)
    yield "merton", "E[F Z*] Monte Carlo", r.price, r.stderr
    r = pr.crosscheck_price(merton, claim, mk.GridSpec(1.0, 50), cross_M, seed=seed)
    yield "merton", "representation cross-check", r.price, r.stderr
    r = pr.mc_minimal_variance_price(mk.merton_model(lam=0.0), claim, M, seed)
    yield "merton lambda=0", "E[F Z*] Monte Carlo", r.price, r.stderr
    for m in (mk.merton_multi_model(), mk.merton_mixed_model()):
        r = pr.mc_minimal_variance_price(m, claim, M, seed)
        yield m.name, "E[F Z*] Monte Carlo", r.price, r.stderr


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--M", type=int, default=10**6, help="Monte-Carlo paths (default %(default)s)")
    ap.add_argument("--cross-M", type=int, default=10**4, help="cross-check paths (default %(default)s)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/pricing.csv")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "quantity", "price", "stderr"])
        for row in rows(args.M, args.seed, args.cross_M):
            w.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])
            print(f"{row[0]:16s} {row[1]:32s} {row[2]:.6f} +- {row[3]:.6f}", file=sys.stderr)


if __name__ == "__main__":
    main()
