"""Command-line entry point: ``qhedge {price,simulate,train,evaluate,compare,sweep}``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags. The seed falls back to the
``QHEDGE_SEED`` environment variable and then to 0.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import market as mk
from .deephedge import (
    TrainConfig,
    bs_reference_portfolio,
    checkpoint_name,
    compare_residuals,
    evaluate,
    l2_distance,
    sweep,
    train,
    write_sweep_csv,
)
from .errors import (
    CheckpointMismatch,
    ConfigInvalid,
    InvalidParameter,
    MomentUndefined,
    NonFiniteLoss,
    QHedgeError,
    UnsupportedModel,
)
from .nn import load_checkpoint
from .pricing import (
    CallClaim,
    PriceResult,
    bs_price,
    crosscheck_price,
    mc_minimal_variance_price,
    merton_price_model,
    qstar_series_price,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

MODEL_TYPES = ("bs", "bsmb", "merton", "merton-multi", "merton-mixed", "kou")
ROUTES = ("analytic", "series", "mv-series", "mc", "crosscheck")

# Per-model parameter defaults. Lists are comma-separated in configs/flags.
MODEL_DEFAULTS = {
    "bs": dict(alpha0=0.3, sigma0=[0.2], s0=1.0),
    "bsmb": dict(alpha0=0.3, sigma0=[0.11, 0.16, 0.05], s0=1.0),
    "merton": dict(alpha0=0.2, sigma0=[0.2], s0=1.0, lam=[5.0], mu=[-0.2], delta=[0.05]),
    "merton-multi": dict(alpha0=0.2, sigma0=[0.2], s0=1.0, lam=[3.0, 5.0, 2.0], mu=[0.1, 0.1, 0.05],
                         delta=[0.05, 0.02, 0.01]),
    "merton-mixed": dict(alpha0=0.2, sigma0=[0.2], s0=1.0, lam=[3.0, 5.0, 2.0], mu=[0.1, 0.1, 0.05],
                         delta=[0.05, 0.02, 0.01]),
    "kou": dict(alpha0=0.15, sigma0=[0.2], s0=1.0, lam=[10.0], eta1=[50.0], eta2=[25.0], p=[0.3]),
}
MODEL_KEYS = ("type", "alpha0", "sigma0", "s0", "lam", "mu", "delta", "eta1", "eta2", "p")
LIST_KEYS = ("sigma0", "lam", "mu", "delta", "eta1", "eta2", "p")

# Everything else: section -> key -> default ("auto" resolved per model).
DEFAULTS = {
    "claim": dict(K=0.5, T=1.0),
    "grid": dict(R="auto"),
    "price": dict(route="mc", M=1_000_000, J_max=60, crosscheck_M=10_000, crosscheck_R=50),
    "train": dict(epochs=1500, batch=256, hidden=64, lr=0.0005, scheme="direct", eval_size=10000,
                  negative_path_policy="discard-batch", clip_norm=10.0),
    "run": dict(seed="env", out_dir="."),
}


def _help_epilog() -> str:
    lines = ["config keys (INI sections) and defaults:", "  [model]  type=bs"]
    for t, d in MODEL_DEFAULTS.items():
        vals = ", ".join(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in d.items())
        lines.append(f"     {t}: {vals}")
    for sec, d in DEFAULTS.items():
        lines.append(f"  [{sec}]  " + ", ".join(f"{k}={v}" for k, v in d.items()))
    lines.append("  grid.R=auto means 40 without jumps, 150 with jumps; run.seed=env reads QHEDGE_SEED (else 0)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Config resolution


def read_config(path) -> dict:
    """Parse an INI file into {section: {key: str}}, rejecting unknown keys."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (K, T, R)
    try:
        if not cp.read(path):
            raise ConfigInvalid(f"cannot read config {path}")
    except configparser.Error as e:
        raise ConfigInvalid(str(e)) from None
    out = {}
    for sec in cp.sections():
        allowed = MODEL_KEYS if sec == "model" else tuple(DEFAULTS.get(sec, {}))
        if sec != "model" and sec not in DEFAULTS:
            raise ConfigInvalid(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in allowed:
                raise ConfigInvalid(f"unknown key {sec}.{key}")
        out[sec] = dict(cp[sec])
    return out


def _num(key, text):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{key}: expected a number, got {text!r}") from None


def _int(key, text):
    v = _num(key, text)
    if v != int(v):
        raise ConfigInvalid(f"{key}: expected an integer, got {text!r}")
    return int(v)


def _list(key, text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [_num(key, v) for v in str(text).split(",") if v.strip()]


def resolve(args, file_cfg: dict) -> dict:
    """Merge defaults, file values and flags into a typed settings dict."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    model_cfg = dict(file_cfg.get("model", {}))
    for sec, vals in file_cfg.items():
        if sec != "model":
            cfg[sec].update(vals)
    # flags override file values
    flag_map = {"K": ("claim", "K"), "T": ("claim", "T"), "R": ("grid", "R"), "route": ("price", "route"),
                "M": ("price", "M"), "J_max": ("price", "J_max"), "epochs": ("train", "epochs"),
                "batch": ("train", "batch"), "hidden": ("train", "hidden"), "lr": ("train", "lr"),
                "scheme": ("train", "scheme"), "eval_size": ("train", "eval_size"),
                "negative_path_policy": ("train", "negative_path_policy"),
                "seed": ("run", "seed"), "out_dir": ("run", "out_dir")}
    for flag, (sec, key) in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[sec][key] = v
    if getattr(args, "model", None):
        model_cfg["type"] = args.model
    for key in MODEL_KEYS[1:]:
        v = getattr(args, f"m_{key}", None)
        if v is not None:
            model_cfg[key] = v

    mtype = model_cfg.get("type", "bs")
    if mtype not in MODEL_TYPES:
        raise ConfigInvalid(f"unknown model type {mtype!r}; choose from {', '.join(MODEL_TYPES)}")
    params = dict(MODEL_DEFAULTS[mtype])
    for key, val in model_cfg.items():
        if key == "type":
            continue
        if key not in params:
            raise ConfigInvalid(f"model.{key} does not apply to model type {mtype}")
        params[key] = _list(key, val) if key in LIST_KEYS else _num(key, val)
    model = build_model(mtype, params)

    claim = CallClaim(_num("K", cfg["claim"]["K"]), _num("T", cfg["claim"]["T"]))
    R = cfg["grid"]["R"]
    R = (150 if model.has_jumps else 40) if R == "auto" else _int("R", R)
    seed = cfg["run"]["seed"]
    if seed == "env":
        env = os.environ.get("QHEDGE_SEED")
        seed = _int("QHEDGE_SEED", env) if env is not None else 0
    else:
        seed = _int("seed", seed)
    tr = cfg["train"]
    tconf = TrainConfig(epochs=_int("epochs", tr["epochs"]), batch=_int("batch", tr["batch"]),
                        hidden=_int("hidden", tr["hidden"]), lr=_num("lr", tr["lr"]), R=R,
                        scheme=str(tr["scheme"]), seed=seed, eval_size=_int("eval_size", tr["eval_size"]),
                        negative_path_policy=str(tr["negative_path_policy"]),
                        clip_norm=_num("clip_norm", tr["clip_norm"]))
    pr = cfg["price"]
    route = str(pr["route"])
    if route not in ROUTES:
        raise ConfigInvalid(f"unknown route {route!r}; choose from {', '.join(ROUTES)}")
    return dict(model=model, claim=claim, grid=mk.GridSpec(claim.T, R), seed=seed, train=tconf,
                route=route, M=_int("M", pr["M"]), J_max=_int("J_max", pr["J_max"]),
                crosscheck_M=_int("crosscheck_M", pr["crosscheck_M"]),
                crosscheck_R=_int("crosscheck_R", pr["crosscheck_R"]),
                out_dir=Path(str(cfg["run"]["out_dir"])))


def build_model(mtype: str, p: dict) -> mk.MarketModel:
    try:
        if mtype == "bs":
            (sigma,) = p["sigma0"]
            return mk.bs_model(p["alpha0"], sigma, p["s0"])
        if mtype == "bsmb":
            return mk.bsmb_model(p["alpha0"], tuple(p["sigma0"]), p["s0"])
        if mtype == "merton":
            (sigma,), (lam,), (mu,), (delta,) = p["sigma0"], p["lam"], p["mu"], p["delta"]
            return mk.merton_model(p["alpha0"], sigma, lam, mu, delta, p["s0"])
        if mtype in ("merton-multi", "merton-mixed"):
            fn = mk.merton_multi_model if mtype == "merton-multi" else mk.merton_mixed_model
            if not len(p["lam"]) == len(p["mu"]) == len(p["delta"]):
                raise ConfigInvalid("lam, mu and delta need equal lengths")
            return fn(p["alpha0"], p["sigma0"][0], tuple(p["lam"]), tuple(p["mu"]), tuple(p["delta"]), p["s0"])
        (sigma,), (lam,), (e1,), (e2,), (pp,) = p["sigma0"], p["lam"], p["eta1"], p["eta2"], p["p"]
        return mk.kou_model(p["alpha0"], sigma, lam, e1, e2, pp, p["s0"])
    except ValueError as e:
        if isinstance(e, QHedgeError):
            raise ConfigInvalid(str(e)) from None
        raise ConfigInvalid(f"{mtype}: wrong number of values ({e})") from None


# ---------------------------------------------------------------------------
# Commands


def _emit(text: str, out: Path | None) -> None:
    print(text)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")


def cmd_price(s: dict, args) -> PriceResult:
    model, claim, route = s["model"], s["claim"], s["route"]
    if route == "analytic":
        if model.has_jumps:
            raise UnsupportedModel("analytic route needs a model without jumps (use series or mc)")
        sigma = math.sqrt(model.sigma_sq)
        res = PriceResult(float(bs_price(0.0, model.s0, sigma, 0.0, claim.T, claim.K)), method="analytic",
                          params=dict(model=model.name, K=claim.K, T=claim.T, sigma=sigma))
    elif route == "series":
        res = merton_price_model(model, claim, s["J_max"])
    elif route == "mv-series":
        res = qstar_series_price(model, claim, s["J_max"])
    elif route == "mc":
        res = mc_minimal_variance_price(model, claim, s["M"], s["seed"])
    else:
        res = crosscheck_price(model, claim, mk.GridSpec(claim.T, s["crosscheck_R"]), s["crosscheck_M"],
                               s["J_max"], s["seed"])
    _emit(res.to_json(), Path(args.output) if args.output else None)
    return res


def cmd_simulate(s: dict, args) -> None:
    model, grid = s["model"], s["grid"]
    inc = mk.sample_increments(model, grid, args.paths, s["seed"])
    stock = mk.simulate_stock(model, grid, inc, s["train"].scheme, strict=False)
    wealth = mk.evolve_wealth(inc, model, grid, args.x0, args.pi, s["train"].scheme, strict=False)
    out = s["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    mk.write_paths_csv(out / "paths.csv", mk.PathBatch(stock, wealth, inc, grid))
    if args.increments:
        mk.write_increments(out / "increments.bin", inc)
    print(json.dumps(dict(paths=args.paths, R=grid.R, seed=s["seed"], file=str(out / "paths.csv"))))


def cmd_train(s: dict, args) -> None:
    model, claim, cfg = s["model"], s["claim"], s["train"]
    out = s["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / checkpoint_name(model.name, claim.T, cfg.R, cfg.seed)
    try:
        report = train(model, claim, cfg, checkpoint_path=ckpt)
    except NonFiniteLoss as e:
        # keep the curve up to the failure next to the last good checkpoint
        if e.report is not None:
            e.report.write_loss_curve(out / "loss_curve.csv")
        raise
    report.write_loss_curve(out / "loss_curve.csv")
    x0 = report.x0_curve[report.epochs.index(report.best_epoch)] if report.epochs else None
    print(json.dumps(dict(best_epoch=report.best_epoch, best_loss=report.best_loss, x0=x0,
                          discarded_batches=report.discarded_batches, checkpoint=str(ckpt))))


def _load(args, model: mk.MarketModel):
    if not args.checkpoint:
        raise ConfigInvalid("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise CheckpointMismatch(f"checkpoint {args.checkpoint} not found")
    net, meta = load_checkpoint(args.checkpoint)
    for key, have in (("d_B", model.d_B), ("d_N", model.d_N)):
        if key in meta and int(meta[key]) != have:
            raise CheckpointMismatch(f"checkpoint {key}={meta[key]} but model has {have}")
    return net


def cmd_evaluate(s: dict, args) -> None:
    model, claim, grid = s["model"], s["claim"], s["grid"]
    net = _load(args, model)
    ev = evaluate(net, model, claim, grid, s["train"].eval_size, s["seed"], s["train"].scheme)
    res = dict(loss=ev.loss, x0=ev.x0, residual_mean=float(ev.residuals.mean()),
               residual_stderr=ev.residual_stderr, eval_size=int(ev.residuals.size), seed=s["seed"])
    if not model.has_jumps:
        phi = bs_reference_portfolio(ev.stock, ev.wealth, grid, model, claim)
        res["l2"] = l2_distance(ev.pi, phi, grid.dt)
    _emit(json.dumps(res), Path(args.output) if args.output else None)


def cmd_compare(s: dict, args) -> None:
    model, claim, grid = s["model"], s["claim"], s["grid"]
    net = _load(args, model)
    rep = compare_residuals(model, claim, grid, args.paths, net, s["seed"], feedback=args.feedback,
                            J_max=s["J_max"])
    out = s["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "residuals.csv")
    print(json.dumps(dict(x0=rep.x0, stats=rep.stats)))


def parse_grid(text: str):
    """``"T=0.5,1,2;R=40,80,160"`` -> [(T, R), ...] in row-major (T outer) order."""
    parts = {}
    for chunk in text.split(";"):
        key, _, vals = chunk.partition("=")
        key = key.strip()
        if key not in ("T", "R") or not vals:
            raise ConfigInvalid(f"bad sweep grid component {chunk!r}")
        parts[key] = [v.strip() for v in vals.split(",") if v.strip()]
    if set(parts) != {"T", "R"}:
        raise ConfigInvalid("sweep grid needs both T=... and R=...")
    return [(_num("T", T), _int("R", R)) for T in parts["T"] for R in parts["R"]]


def cmd_sweep(s: dict, args) -> None:
    cells = parse_grid(args.grid)
    rows = sweep(s["model"], s["claim"].K, cells, s["train"], jobs=args.jobs, ref_paths=args.ref_paths)
    out = s["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    failed = [r for r in rows if r.error]
    print(json.dumps(dict(cells=len(rows), failed=len(failed), file=str(out / "sweep.csv"))))


COMMANDS = dict(price=cmd_price, simulate=cmd_simulate, train=cmd_train, evaluate=cmd_evaluate,
                compare=cmd_compare, sweep=cmd_sweep)


# ---------------------------------------------------------------------------
# Parser


class _Formatter(argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (override the config file)")
    g.add_argument("--config", help="INI file with [model] [claim] [grid] [price] [train] [run] sections")
    g.add_argument("--model", choices=MODEL_TYPES, help="market model type (default: bs)")
    g.add_argument("--alpha0", dest="m_alpha0", help="excess drift")
    g.add_argument("--sigma0", dest="m_sigma0", help="volatility vector, comma separated")
    g.add_argument("--s0", dest="m_s0", help="initial stock price")
    g.add_argument("--lam", dest="m_lam", help="jump intensities, comma separated")
    g.add_argument("--mu", dest="m_mu", help="log-normal jump means")
    g.add_argument("--delta", dest="m_delta", help="log-normal jump std devs")
    g.add_argument("--eta1", dest="m_eta1", help="double-exponential upward rate")
    g.add_argument("--eta2", dest="m_eta2", help="double-exponential downward rate")
    g.add_argument("--p", dest="m_p", help="double-exponential upward probability")
    g.add_argument("--K", help="strike (default 0.5)")
    g.add_argument("--T", help="maturity (default 1)")
    g.add_argument("--R", help="time steps (default 40 without jumps, 150 with jumps)")
    g.add_argument("--seed", help="top-level seed (default: $QHEDGE_SEED or 0)")
    g.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    g.add_argument("--scheme", choices=("direct", "log"), help="Euler scheme (default direct)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="qhedge", description="Minimal-variance option pricing and deep hedging.",
                                epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = _Formatter

    sp = sub.add_parser("price", parents=[common], help="price the call", formatter_class=fmt,
                        epilog=_help_epilog())
    sp.add_argument("--route", choices=ROUTES, help="analytic | series | mv-series | mc | crosscheck (default mc)")
    sp.add_argument("--M", help="Monte-Carlo paths (default 1000000)")
    sp.add_argument("--J-max", dest="J_max", help="series truncation (default 60)")
    sp.add_argument("--output", help="also write the JSON result here")

    sp = sub.add_parser("simulate", parents=[common], help="simulate stock and wealth paths", formatter_class=fmt)
    sp.add_argument("--paths", type=int, default=10, help="number of paths (default %(default)s)")
    sp.add_argument("--x0", type=float, default=0.5, help="initial wealth (default %(default)s)")
    sp.add_argument("--pi", type=float, default=1.0, help="constant portfolio fraction (default %(default)s)")
    sp.add_argument("--increments", action="store_true", help="also write increments.bin")

    sp = sub.add_parser("train", parents=[common], help="train the hedging network", formatter_class=fmt,
                        epilog=_help_epilog())
    _train_flags(sp)

    sp = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on fresh paths",
                        formatter_class=fmt)
    sp.add_argument("--checkpoint", help="checkpoint file")
    sp.add_argument("--eval-size", dest="eval_size", help="evaluation paths (default 10000)")
    sp.add_argument("--output", help="also write the JSON result here")

    sp = sub.add_parser("compare", parents=[common], help="residuals of learned vs Merton delta hedge",
                        formatter_class=fmt)
    sp.add_argument("--checkpoint", help="checkpoint file")
    sp.add_argument("--paths", type=int, default=10000, help="common paths (default %(default)s)")
    sp.add_argument("--feedback", action="store_true", help="also run the feedback-form hedge (slow)")
    sp.add_argument("--J-max", dest="J_max", help="series truncation (default 60)")

    sp = sub.add_parser("sweep", parents=[common], help="train/evaluate over a (T, R) grid", formatter_class=fmt)
    sp.add_argument("--grid", default="T=0.5,1,2;R=40,80,160", help="cells as T=...;R=... (default %(default)s)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel cells (default %(default)s)")
    sp.add_argument("--ref-paths", dest="ref_paths", type=int, default=10**6,
                    help="paths for the Monte-Carlo reference price (default %(default)s)")
    _train_flags(sp, epochs_default="3000")
    return p


def _train_flags(sp, epochs_default="1500"):
    sp.add_argument("--epochs", help=f"training epochs (default {epochs_default})")
    sp.add_argument("--batch", help="batch size (default 256)")
    sp.add_argument("--hidden", help="LSTM hidden size (default 64)")
    sp.add_argument("--lr", help="Adam learning rate (default 0.0005)")
    sp.add_argument("--eval-size", dest="eval_size", help="evaluation paths (default 10000)")
    sp.add_argument("--negative-path-policy", dest="negative_path_policy",
                    choices=("discard-batch", "log-scheme"), help="handling of nonpositive paths")
    sp.set_defaults(epochs_default=epochs_default)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = read_config(args.config) if args.config else {}
        if args.command == "sweep" and args.epochs is None and "epochs" not in file_cfg.get("train", {}):
            args.epochs = args.epochs_default
        settings = resolve(args, file_cfg)
        COMMANDS[args.command](settings, args)
    except (ConfigInvalid, UnsupportedModel, CheckpointMismatch, InvalidParameter, MomentUndefined) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QHedgeError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
