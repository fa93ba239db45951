"""Training the hedging network on the quadratic hedging loss, evaluation,
the discrete L2 portfolio distance, residual comparisons and sweeps."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import skew

from . import tensor as tn
from .errors import ConfigInvalid, NonFiniteLoss, ShapeMismatch
from .market import (
    GridSpec,
    Increments,
    MarketModel,
    StepTerms,
    derive_seed,
    direct_update,
    nonpositive_paths,
    sample_increments,
    simulate_stock,
)
from .nn import AdamState, HedgeNet, adam_step, hedge_forward, init_params, save_checkpoint
from .pricing import (
    CallClaim,
    bs_delta_portfolio,
    bs_price,
    claim_coefficients,
    feedback_portfolio,
    mc_minimal_variance_price,
    merton_delta,
    merton_price_model,
    qstar_series_price,
)

log = logging.getLogger(__name__)

# labels passed to derive_seed so that each consumer gets its own stream
_SEED_INIT, _SEED_BATCH, _SEED_EVAL, _SEED_PROBE = 0, 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch: int = 256
    hidden: int = 64
    lr: float = 0.0005
    R: int = 40
    scheme: str = "direct"
    seed: int = 0
    eval_size: int = 10000
    negative_path_policy: str = "discard-batch"
    clip_norm: float = 10.0
    probe_every: int = 0  # record l2 to the BS delta every n epochs (BS models only)
    probe_size: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.hidden < 1 or self.R < 1:
            raise ConfigInvalid("epochs, batch, hidden and R must be >= 1")
        if not self.lr > 0:
            raise ConfigInvalid("lr must be > 0")
        if self.scheme not in ("direct", "log"):
            raise ConfigInvalid(f"scheme must be direct or log, got {self.scheme!r}")
        if self.negative_path_policy not in ("discard-batch", "log-scheme"):
            raise ConfigInvalid(f"unknown negative_path_policy {self.negative_path_policy!r}")
        if self.eval_size < 1:
            raise ConfigInvalid("eval_size must be >= 1")

    def grid(self, claim: CallClaim) -> GridSpec:
        return GridSpec(claim.T, self.R)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # epoch index of each recorded loss
    loss_curve: list = field(default_factory=list)
    x0_curve: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = math.inf
    best_net: HedgeNet | None = None
    final_net: HedgeNet | None = None
    discarded_batches: int = 0
    rerun_log_scheme: int = 0
    probe_curve: list = field(default_factory=list)  # (epoch, l2)
    seconds: float = 0.0

    def write_loss_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "x0"])
            for e, l, x in zip(self.epochs, self.loss_curve, self.x0_curve):
                w.writerow([e, repr(float(l)), repr(float(x))])


def quadratic_loss(x_R, s_R, K: float):
    """(1/2) mean (x_R - (s_R - K)^+)^2 for tensors (recorded) or arrays."""
    payoff = np.maximum(np.asarray(s_R, dtype=float) - K, 0.0)
    if isinstance(x_R, tn.Tensor):
        if x_R.shape != payoff.shape:
            raise ShapeMismatch(f"loss: {x_R.shape} vs {payoff.shape}")
        return tn.scale(tn.mean(tn.square(tn.sub(x_R, payoff))), 0.5)
    x_R = np.asarray(x_R, dtype=float)
    if x_R.shape != payoff.shape:
        raise ShapeMismatch(f"loss: {x_R.shape} vs {payoff.shape}")
    return 0.5 * float(np.mean((x_R - payoff) ** 2))


def checkpoint_name(model_name: str, T: float, R: int, seed: int) -> str:
    return f"{model_name}_{T:g}_{R}_{seed}.ckpt"


def _clip(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def train(model: MarketModel, claim: CallClaim, config: TrainConfig,
          net: HedgeNet | None = None, checkpoint_path=None) -> TrainReport:
    """Algorithm: per epoch a fresh batch, forward, loss, backward, Adam.

    The weights that produced the lowest batch loss are kept (and written to
    ``checkpoint_path`` when given). Batches with a nonpositive stock or
    wealth are skipped or re-run under the log scheme depending on
    ``config.negative_path_policy``.
    """
    grid = config.grid(claim)
    net = net.copy() if net is not None else init_params(config.hidden, derive_seed(config.seed, _SEED_INIT))
    opt = AdamState(lr=config.lr)
    report = TrainReport()
    probe = _make_probe(model, claim, grid, config) if config.probe_every else None
    t0 = time.time()
    for epoch in range(config.epochs):
        inc = sample_increments(model, grid, config.batch, derive_seed(config.seed, _SEED_BATCH, epoch))
        scheme = config.scheme
        S = simulate_stock(model, grid, inc, scheme, strict=False)
        tape = tn.Tape()
        out = hedge_forward(net, inc, model, grid, scheme, tape)
        if scheme == "direct" and (nonpositive_paths(S).any() or nonpositive_paths(out.wealth).any()):
            if config.negative_path_policy == "discard-batch":
                report.discarded_batches += 1
                log.info("epoch %d: nonpositive path, batch discarded", epoch)
                continue
            scheme = "log"
            report.rerun_log_scheme += 1
            S = simulate_stock(model, grid, inc, scheme, strict=False)
            tape = tn.Tape()
            out = hedge_forward(net, inc, model, grid, scheme, tape)
        loss = quadratic_loss(out.terminal, S[:, -1:], claim.K)
        value = float(loss.value)
        if scheme == "log" and not np.isfinite(value) and np.isnan(out.wealth).any():
            # log argument 1 + pi J <= 0 on some path
            report.discarded_batches += 1
            continue
        if not np.isfinite(value):
            report.final_net = net
            report.seconds = time.time() - t0
            if checkpoint_path and report.best_net is not None:
                save_checkpoint(checkpoint_path, report.best_net, _meta(model, claim, config, report))
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", report)
        x0 = float(out.x0.value[0, 0])
        report.epochs.append(epoch)
        report.loss_curve.append(value)
        report.x0_curve.append(x0)
        if value < report.best_loss:
            report.best_loss, report.best_epoch, report.best_net = value, epoch, net
        if probe is not None and epoch % config.probe_every == 0:
            report.probe_curve.append((epoch, probe(net)))
        grads = tn.backward(loss)
        grads = _clip({k: grads.of(v) for k, v in out.bound.items()}, config.clip_norm)
        net = HedgeNet.from_params(adam_step(opt, net.params(), grads))
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d loss %.3e x0 %.5f", epoch, value, x0)
    report.final_net = net
    report.seconds = time.time() - t0
    if report.best_net is None:
        report.best_net = net
    if checkpoint_path:
        save_checkpoint(checkpoint_path, report.best_net, _meta(model, claim, config, report))
    return report


def _meta(model, claim, config, report) -> dict:
    return dict(model=model.name, d_B=model.d_B, d_N=model.d_N, K=claim.K, T=claim.T, R=config.R,
                seed=config.seed, best_epoch=report.best_epoch, scheme=config.scheme)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    loss: float
    x0: float
    pi: np.ndarray
    wealth: np.ndarray
    stock: np.ndarray
    residuals: np.ndarray  # x_R - F
    increments: Increments | None = None

    @property
    def residual_stderr(self) -> float:
        return float(self.residuals.std(ddof=1) / math.sqrt(self.residuals.size))


def evaluate(net: HedgeNet, model: MarketModel, claim: CallClaim, grid: GridSpec,
             eval_size: int = 10000, seed: int = 0, scheme: str = "direct",
             increments: Increments | None = None) -> EvalResult:
    """Run ``net`` without recording on ``eval_size`` fresh paths."""
    inc = increments if increments is not None else sample_increments(
        model, grid, eval_size, derive_seed(seed, _SEED_EVAL))
    S = simulate_stock(model, grid, inc, scheme, strict=False)
    out = hedge_forward(net, inc, model, grid, scheme, None)
    x_R = out.wealth[:, -1]
    F = claim.payoff(S[:, -1])
    return EvalResult(loss=quadratic_loss(x_R, S[:, -1], claim.K), x0=float(out.x0.value[0, 0]),
                      pi=out.pi, wealth=out.wealth, stock=S, residuals=x_R - F, increments=inc)


def l2_distance(pi_hat, phi, dt: float) -> float:
    """(1/M) sum_j sqrt(sum_i (pi_hat_ij - phi_ij)^2 dt)."""
    pi_hat, phi = np.asarray(pi_hat, dtype=float), np.asarray(phi, dtype=float)
    if pi_hat.shape != phi.shape:
        raise ShapeMismatch(f"l2_distance: {pi_hat.shape} vs {phi.shape}")
    if pi_hat.ndim == 1:
        pi_hat, phi = pi_hat[None, :], phi[None, :]
    return float(np.mean(np.sqrt(np.sum((pi_hat - phi) ** 2, axis=1) * dt)))


def bs_reference_portfolio(stock, wealth, grid: GridSpec, model: MarketModel, claim: CallClaim):
    """BS delta fractions along given stock/wealth paths, steps 0..R-1."""
    sigma = math.sqrt(model.sigma_sq)
    t = grid.times()[:-1]
    return bs_delta_portfolio(t[None, :], stock[:, :-1], wealth[:, :-1], sigma, claim.K, claim.T)


def _make_probe(model, claim, grid, config):
    if model.has_jumps:
        return None
    inc = sample_increments(model, grid, config.probe_size, derive_seed(config.seed, _SEED_PROBE))

    def probe(net):
        ev = evaluate(net, model, claim, grid, increments=inc, scheme=config.scheme)
        phi = bs_reference_portfolio(ev.stock, ev.wealth, grid, model, claim)
        return l2_distance(ev.pi, phi, grid.dt)

    return probe


# ---------------------------------------------------------------------------
# Residual comparison between strategies


def run_strategy(model: MarketModel, grid: GridSpec, increments: Increments, stock, x0: float,
                 policy) -> np.ndarray:
    """Wealth paths under ``policy(i, t_i, s_i, x_i) -> pi_i`` (direct scheme)."""
    terms = StepTerms.build(increments, model, grid)
    t = grid.times()
    x = np.empty((increments.M, grid.R + 1))
    x[:, 0] = x0
    for i in range(grid.R):
        pi = policy(i, float(t[i]), stock[:, i], x[:, i])
        x[:, i + 1] = direct_update(x[:, i], pi, terms.drift_dt, terms.diffusion[:, i], terms.jump[:, i])
    return x


@dataclass
class ResidualReport:
    residuals: dict  # strategy -> array of x_R - F
    x0: dict
    stats: dict  # strategy -> {mean, std, skewness, q01, q99}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "path", "residual"])
            for name, res in self.residuals.items():
                for j, r in enumerate(res):
                    w.writerow([name, j, repr(float(r))])


def residual_stats(res: np.ndarray) -> dict:
    res = np.asarray(res, dtype=float)
    return dict(mean=float(res.mean()), std=float(res.std(ddof=1)), skewness=float(skew(res)),
                q01=float(np.quantile(res, 0.01)), q99=float(np.quantile(res, 0.99)))


def compare_residuals(model: MarketModel, claim: CallClaim, grid: GridSpec, M: int, net: HedgeNet,
                      seed: int = 0, feedback: bool = False, J_max: int = 60) -> ResidualReport:
    """Terminal hedging errors of the learned hedge and Merton's delta hedge
    (and optionally the feedback-form hedge) on common paths."""
    inc = sample_increments(model, grid, M, derive_seed(seed, _SEED_EVAL))
    S = simulate_stock(model, grid, inc, "direct", strict=False)
    F = claim.payoff(S[:, -1])
    residuals, x0s = {}, {}

    learned = evaluate(net, model, claim, grid, increments=inc)
    residuals["learned"], x0s["learned"] = learned.residuals, learned.x0

    xm = merton_price_model(model, claim, J_max).price
    wm = run_strategy(model, grid, inc, S, xm,
                      lambda i, t, s, x: merton_delta(t, s, model, claim, J_max) * s / x)
    residuals["merton_delta"], x0s["merton_delta"] = wm[:, -1] - F, xm

    if feedback:
        xf = qstar_series_price(model, claim, J_max).price

        def fb(i, t, s, x):
            F_t, beta, kappa = claim_coefficients(t, s, model, claim, "qstar", J_max)
            return feedback_portfolio(t, x, F_t, beta, kappa, model)

        wf = run_strategy(model, grid, inc, S, xf, fb)
        residuals["feedback"], x0s["feedback"] = wf[:, -1] - F, xf
    stats = {k: residual_stats(v) for k, v in residuals.items()}
    return ResidualReport(residuals, x0s, stats)


# ---------------------------------------------------------------------------
# Sweeps over (T, R)


def reference_price(model: MarketModel, claim: CallClaim, M: int = 10**6, seed: int = 0) -> float:
    if not model.has_jumps:
        return float(bs_price(0.0, model.s0, math.sqrt(model.sigma_sq), 0.0, claim.T, claim.K))
    return mc_minimal_variance_price(model, claim, M, seed).price


@dataclass
class SweepRow:
    model: str
    T: float
    R: int
    loss: float
    abs_price_err: float
    l2: float
    x0: float = math.nan
    error: str = ""


def _sweep_cell(args) -> SweepRow:
    model, K, T, R, config, ref = args
    try:
        claim = CallClaim(K, T)
        cfg = TrainConfig(**{**config.__dict__, "R": R})
        rep = train(model, claim, cfg)
        grid = cfg.grid(claim)
        ev = evaluate(rep.best_net, model, claim, grid, cfg.eval_size, cfg.seed, cfg.scheme)
        l2 = math.nan
        if not model.has_jumps:
            phi = bs_reference_portfolio(ev.stock, ev.wealth, grid, model, claim)
            l2 = l2_distance(ev.pi, phi, grid.dt)
        return SweepRow(model.name, T, R, ev.loss, abs(ev.x0 - ref), l2, ev.x0)
    except Exception as exc:  # a failed cell is recorded and the sweep goes on
        return SweepRow(model.name, T, R, math.nan, math.nan, math.nan, math.nan, repr(exc))


def sweep(model: MarketModel, K: float, cells, config: TrainConfig, jobs: int = 1,
          ref_paths: int = 10**6) -> list[SweepRow]:
    """Train and evaluate one net per (T, R) cell."""
    refs = {T: reference_price(model, CallClaim(K, T), ref_paths, config.seed) for T, _ in cells}
    tasks = [(model, K, T, R, config, refs[T]) for T, R in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_cell, tasks))
    return [_sweep_cell(t) for t in tasks]


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "T", "R", "loss", "abs_price_err", "l2"])
        for r in rows:
            w.writerow([r.model, repr(r.T), r.R, repr(r.loss), repr(r.abs_price_err), repr(r.l2)])


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
