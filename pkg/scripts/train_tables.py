"""Train the hedging network on each benchmark market and tabulate the
learned price against the reference price; for Merton also write the
terminal residuals of the learned hedge next to Merton's delta hedge.

    python3 scripts/train_tables.py --out-dir results
    python3 scripts/train_tables.py --models bs --epochs 6000 --hidden 512   # full scale, hours
"""

import argparse
import csv
import logging
import math
from pathlib import Path

from qhedge import market as mk
from qhedge.deephedge import (
    TrainConfig,
    bs_reference_portfolio,
    checkpoint_name,
    compare_residuals,
    evaluate,
    l2_distance,
    train,
)
from qhedge.nn import save_checkpoint
from qhedge.pricing import CallClaim, bs_price, mc_minimal_variance_price

MODELS = {
    "bs": (mk.bs_model, 40, 1500),
    "bsmb": (mk.bsmb_model, 40, 1500),
    "merton": (mk.merton_model, 150, 2000),
    "merton-multi": (mk.merton_multi_model, 150, 2000),
    "merton-mixed": (mk.merton_mixed_model, 150, 2000),
    "kou": (mk.kou_model, 150, 1500),
}


def reference(model, claim, seed):
    if not model.has_jumps:
        return bs_price(0.0, model.s0, math.sqrt(model.sigma_sq), 0.0, claim.T, claim.K), 0.0
    if model.name == "kou":
        return math.nan, math.nan  # no valid density for this jump law
    r = mc_minimal_variance_price(model, claim, 10**6, seed)
    return r.price, r.stderr


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--models", default="bs,bsmb,merton,kou", help="comma separated (default %(default)s)")
    ap.add_argument("--epochs", type=int, help="override per-model epochs")
    ap.add_argument("--R", type=int, help="override per-model time steps")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--eval-size", type=int, default=10000)
    ap.add_argument("--residual-paths", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    claim = CallClaim(0.5, 1.0)
    table = []
    for name in args.models.split(","):
        make, R, epochs = MODELS[name]
        model = make()
        cfg = TrainConfig(epochs=args.epochs or epochs, R=args.R or R, hidden=args.hidden, batch=args.batch,
                          eval_size=args.eval_size, seed=args.seed)
        rep = train(model, claim, cfg)
        rep.write_loss_curve(out / f"loss_curve_{name}.csv")
        save_checkpoint(out / checkpoint_name(name, claim.T, cfg.R, cfg.seed), rep.best_net)
        grid = cfg.grid(claim)
        ev = evaluate(rep.best_net, model, claim, grid, cfg.eval_size, cfg.seed)
        l2 = math.nan
        if not model.has_jumps:
            l2 = l2_distance(ev.pi, bs_reference_portfolio(ev.stock, ev.wealth, grid, model, claim), grid.dt)
        ref, ref_se = reference(model, claim, args.seed)
        table.append([name, ref, ref_se, ev.x0, rep.best_loss, ev.loss, l2, rep.best_epoch,
                      rep.discarded_batches, round(rep.seconds)])
        if name == "merton":
            res = compare_residuals(model, claim, grid, args.residual_paths, rep.best_net, seed=args.seed + 1)
            res.write_csv(out / "residuals_merton.csv")
            for k, st in res.stats.items():
                logging.info("%s residuals: %s", k, {a: round(b, 5) for a, b in st.items()})
    with open(out / "train_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "z_hat", "z_hat_stderr", "x0", "loss_min", "eval_loss", "l2", "best_epoch",
                    "discarded_batches", "seconds"])
        for row in table:
            w.writerow([row[0]] + [f"{v:.6g}" if isinstance(v, float) else v for v in row[1:]])


if __name__ == "__main__":
    main()
