"""Train/evaluate over a (T, R) grid for the BS and Merton markets and write
one sweep CSV per market.

    python3 scripts/scalability.py --out-dir results                 # reduced scale (d=32, 1000 epochs)
    python3 scripts/scalability.py --hidden 512 --epochs 3000        # full scale, many hours
"""

import argparse
from pathlib import Path

from qhedge import market as mk
from qhedge.deephedge import TrainConfig, sweep, write_sweep_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--T", default="0.5,1,2")
    ap.add_argument("--R", default="40,80,160")
    ap.add_argument("--models", default="bs,merton")
    ap.add_argument("--epochs", type=int, default=1000)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--eval-size", type=int, default=10000)
    ap.add_argument("--ref-paths", type=int, default=10**6)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args(argv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(float(T), int(R)) for T in args.T.split(",") for R in args.R.split(",")]
    cfg = TrainConfig(epochs=args.epochs, hidden=args.hidden, batch=args.batch, eval_size=args.eval_size,
                      seed=args.seed)
    makers = dict(bs=mk.bs_model, merton=mk.merton_model)
    for name in args.models.split(","):
        rows = sweep(makers[name](), 0.5, cells, cfg, jobs=args.jobs, ref_paths=args.ref_paths)
        write_sweep_csv(out / f"sweep_{name}.csv", rows)
        for r in rows:
            print(f"{name} T={r.T:g} R={r.R}: loss {r.loss:.3e} |x0-ref| {r.abs_price_err:.3e} l2 {r.l2:.3f} "
                  f"{r.error}")


if __name__ == "__main__":
    main()
