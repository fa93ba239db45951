"""Closed-form, series and Monte-Carlo prices for European calls.

Three prices appear side by side:

* Black-Scholes, for the continuous models;
* Merton's price under the diversifiable-jump measure Q^M (Poisson series);
* the minimal-variance price E[F Z*(T)] under the variance-optimal measure
  Q*, whose density is

      Z*(t) = exp({-G^2 |sigma|^2 / 2 - G lambda.k} t + G sigma.B(t)) * prod_jumps (1 + G (y - 1))

  with G = -alpha0 / (|sigma|^2 + sum_l lambda_l m_l).

All routines assume zero interest rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr
from scipy.stats import poisson

from .errors import (
    DivisionByZeroWealth,
    InvalidParameter,
    TruncationNotConverged,
    UnsupportedModel,
    ZeroVolatility,
)
from .market import (
    BLOCK_PATHS,
    DoubleExponential,
    GridSpec,
    Increments,
    LogNormal,
    MarketModel,
    Mixture,
    block_rng,
    jump_moments,
    sample_increments,
    simulate_stock,
)

J_MAX_DEFAULT = 60
TRUNCATION_TOL = 1e-9
GH_NODES = 64


@dataclass(frozen=True)
class CallClaim:
    K: float
    T: float

    def __post_init__(self):
        if not self.K > 0 or not self.T > 0:
            raise InvalidParameter("strike and maturity must be > 0")

    def payoff(self, s_T):
        return np.maximum(np.asarray(s_T) - self.K, 0.0)


@dataclass
class PriceResult:
    price: float
    stderr: float = 0.0
    method: str = "analytic"
    n_paths: int = 0
    seed: int | None = None
    signed_measure_used: bool = False
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        ordered = {k: d[k] for k in ("method", "price", "stderr", "n_paths", "seed",
                                     "signed_measure_used", "params")}
        return json.dumps(ordered, sort_keys=False)


# ---------------------------------------------------------------------------
# Black-Scholes


def bs_price(t, s, sigma, r, T, K):
    """Black-Scholes call value. Expired or zero-volatility inputs give the
    (discounted-strike) intrinsic value."""
    s, tau = np.asarray(s, dtype=float), np.asarray(T - t, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    disc_K = K * np.exp(-r * tau)
    if K == 0:
        return s * 1.0
    vol = sigma * np.sqrt(np.maximum(tau, 0.0))
    degenerate = vol <= 0
    safe = np.where(degenerate, 1.0, vol)
    with np.errstate(divide="ignore"):
        d1 = (np.log(s / K) + r * tau + 0.5 * vol**2) / safe
    d2 = d1 - vol
    value = s * ndtr(d1) - disc_K * ndtr(d2)
    out = np.where(degenerate, np.maximum(s - disc_K, 0.0), value)
    return out if out.ndim else float(out)


def bs_delta(t, s, sigma, r, T, K):
    s, tau = np.asarray(s, dtype=float), np.asarray(T - t, dtype=float)
    vol = sigma * np.sqrt(np.maximum(tau, 0.0))
    if np.any(vol <= 0):
        return np.where(s > K * np.exp(-r * tau), 1.0, 0.0)
    d1 = (np.log(s / K) + r * tau + 0.5 * vol**2) / vol
    return ndtr(d1)


def bs_delta_portfolio(t, s, x, sigma, K, T):
    """Delta hedge as a fraction of wealth: Phi(d) s / x."""
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise DivisionByZeroWealth("wealth is zero")
    tau = T - np.asarray(t, dtype=float)
    d = (np.log(np.asarray(s) / K) + 0.5 * sigma**2 * tau) / (sigma * np.sqrt(tau))
    return ndtr(d) * np.asarray(s) / x


# ---------------------------------------------------------------------------
# Model helpers


def compute_G(model: MarketModel) -> float:
    """G = -alpha0 / (|sigma0|^2 + gamma0 sum_l lambda_l m_l)."""
    v = model.total_variance()
    if not v > 0:
        raise ZeroVolatility("degenerate market: |sigma0|^2 + sum lambda m = 0")
    return -model.alpha0 / v


@dataclass(frozen=True)
class _MertonParams:
    alpha: float
    sigma: float
    lam: float
    mu: float
    delta: float

    @property
    def k(self):
        return math.exp(self.mu + 0.5 * self.delta**2) - 1.0 if self.lam > 0 else 0.0

    @property
    def m(self):
        if self.lam == 0:
            return 0.0
        return math.exp(2 * self.mu + 2 * self.delta**2) - 2 * math.exp(self.mu + 0.5 * self.delta**2) + 1


def _merton_params(model: MarketModel) -> _MertonParams:
    """Scalar parameters of a single-log-normal-jump (or jump-free) model."""
    sigma = math.sqrt(model.sigma_sq)
    if not model.has_jumps:
        return _MertonParams(model.alpha0, sigma, 0.0, 0.0, 1.0)
    if model.d_N != 1 or not isinstance(model.jumps[0], LogNormal):
        raise UnsupportedModel("series formulas need a single log-normal jump component")
    spec = model.jumps[0]
    return _MertonParams(model.alpha0, sigma, model.lam[0], spec.mu, spec.delta)


def _poisson_weights(rate: float, J_max: int, scale: float) -> np.ndarray:
    """Poisson(rate) pmf for j = 0..J_max; raises if the dropped tail mass
    times ``scale`` exceeds the truncation tolerance."""
    if J_max < 0:
        raise InvalidParameter("J_max must be >= 0")
    j = np.arange(J_max + 1)
    if rate == 0:
        w = np.zeros(J_max + 1)
        w[0] = 1.0
        return w
    w = np.exp(j * math.log(rate) - rate - gammaln(j + 1))
    tail = float(poisson.sf(J_max, rate))
    if tail * scale > TRUNCATION_TOL * max(scale, 1.0):
        raise TruncationNotConverged(f"Poisson tail {tail:.3e} at J_max={J_max} (rate {rate:.3g})")
    return w


def _effective_terms(w: np.ndarray) -> np.ndarray:
    """Drop trailing weights too small to matter in double precision."""
    keep = np.nonzero(w > 1e-18)[0]
    return w[: keep[-1] + 1] if keep.size else w[:1]


# ---------------------------------------------------------------------------
# Merton's price and delta


def merton_series_price(s0, K, sigma0, lam, mu, delta, T, J_max=J_MAX_DEFAULT) -> PriceResult:
    """Merton's jump-diffusion call price as a Poisson mixture of BS prices."""
    k = math.exp(mu + 0.5 * delta**2) - 1.0
    rate = lam * (k + 1.0) * T
    w = _poisson_weights(rate, J_max, s0)
    price = 0.0
    for j, wj in enumerate(w):
        sig_j = math.sqrt(sigma0**2 + j * delta**2 / T)
        r_j = (j * mu + 0.5 * j * delta**2) / T - lam * k
        price += wj * bs_price(0.0, s0, sig_j, r_j, T, K)
    params = dict(s0=s0, K=K, sigma0=sigma0, lam=lam, mu=mu, delta=delta, T=T, J_max=J_max)
    return PriceResult(float(price), 0.0, "series", params=params)


def merton_price_model(model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT) -> PriceResult:
    p = _merton_params(model)
    return merton_series_price(model.s0, claim.K, p.sigma, p.lam, p.mu, p.delta, claim.T, J_max)


def merton_delta(t, s, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT):
    """Derivative in s of Merton's series price: Poisson-weighted BS deltas."""
    p = _merton_params(model)
    tau = claim.T - t
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        return (s >= claim.K).astype(float)
    k = p.k
    w = _effective_terms(_poisson_weights(p.lam * (k + 1.0) * tau, J_max, 1.0))
    out = np.zeros_like(s)
    for j, wj in enumerate(w):
        sig_j = math.sqrt(p.sigma**2 + j * p.delta**2 / tau)
        r_j = (j * p.mu + 0.5 * j * p.delta**2) / tau - p.lam * k
        out += wj * bs_delta(0.0, s, sig_j, r_j, tau, claim.K)
    return out


# ---------------------------------------------------------------------------
# Conditional claim values and martingale-representation coefficients


def _lognormal_call_terms(logmean, var, K):
    """E[(e^X - K)^+] and E[e^X 1{e^X >= K}] for X ~ N(logmean, var)."""
    sd = np.sqrt(var)
    d1 = (logmean + var - math.log(K)) / sd
    big = np.exp(logmean + 0.5 * var) * ndtr(d1)
    return big - K * ndtr(d1 - sd), big


def _p_series(tau, s, p: _MertonParams, K, J_max):
    """Value V(tau, s) = E^s[(S_tau - K)^+] and E^s[1{S_tau>=K} S_tau] under P."""
    s = np.asarray(s, dtype=float)
    w = _effective_terms(_poisson_weights(p.lam * tau, J_max, float(np.max(s, initial=1.0))))
    logL = np.log(s) + (p.alpha - 0.5 * p.sigma**2 - p.lam * p.k) * tau
    value = np.zeros(np.shape(logL))
    itm = np.zeros(np.shape(logL))
    for j, wj in enumerate(w):
        var = p.sigma**2 * tau + j * p.delta**2
        v, b = _lognormal_call_terms(logL + j * p.mu, var, K)
        value = value + wj * v
        itm = itm + wj * b
    return value, itm


def claim_value(t, s, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT):
    """F(t) = E[(S(T) - K)^+ | S(t) = s] under the physical measure."""
    return _p_series(claim.T - t, s, _merton_params(model), claim.K, J_max)[0]


def beta_series(t, s, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT):
    """Brownian integrand beta(t) = sigma E^{s}[1{S(T-t) >= K} S(T-t)]."""
    p = _merton_params(model)
    if not t < claim.T:
        raise InvalidParameter("beta_series needs t < T")
    return p.sigma * _p_series(claim.T - t, s, p, claim.K, J_max)[1]


def kappa_series(t, s, y, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT):
    """Indicator-difference jump coefficient

        P(y S(T-t) >= K) - P(S(T-t) >= K)

    conditioned on S(t) = s, summed over the Poisson number of jumps.
    """
    p = _merton_params(model)
    tau = claim.T - t
    if not tau > 0:
        raise InvalidParameter("kappa_series needs t < T")
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise InvalidParameter("jump size y must be > 0")
    s = np.asarray(s, dtype=float)
    w = _effective_terms(_poisson_weights(p.lam * tau, J_max, 1.0))
    logL = np.log(s) + (p.alpha - 0.5 * p.sigma**2 - p.lam * p.k) * tau
    logK = math.log(claim.K)
    out = 0.0
    for j, wj in enumerate(w):
        sd = math.sqrt(j * p.delta**2 + p.sigma**2 * tau)
        out = out + wj * (ndtr((logK - logL - j * p.mu) / sd)
                          - ndtr((logK - np.log(y) - logL - j * p.mu) / sd))
    return out


def kappa_claim_series(t, s, y, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT):
    """Jump integrand of the claim's martingale: F(t) after a relative jump
    ``y - 1`` minus F(t) before it, i.e. V(t, y s) - V(t, s)."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    return claim_value(t, y * s, model, claim, J_max) - claim_value(t, s, model, claim, J_max)


# ---------------------------------------------------------------------------
# Exact value under Q* for the single-log-normal model


def _qstar_setup(p: _MertonParams, G: float):
    if p.lam == 0:
        return 0.0, 1.0, 0.0, 0.0
    one_gk = 1.0 + G * p.k
    if not one_gk > 0:
        raise UnsupportedModel("1 + G k <= 0: Q* has no positive jump intensity")
    lam_star = p.lam * one_gk
    w_base = (1.0 - G) / one_gk  # weight of N(mu, delta^2)
    w_tilt = G * (1.0 + p.k) / one_gk  # weight of N(mu + delta^2, delta^2)
    drift = -p.lam * (p.k + G * p.m)  # -lambda* k*, makes S a Q*-martingale
    return lam_star, w_base, w_tilt, drift


def qstar_value(t, s, model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT, with_delta=False):
    """E_{Q*}[(S(T) - K)^+ | S(t) = s] in closed form.

    Under Q* the log-jump law is the signed mixture
    ``w_base N(mu, delta^2) + w_tilt N(mu + delta^2, delta^2)`` with intensity
    ``lambda (1 + G k)``, so conditioning on the number of jumps of each kind
    leaves a Black-Scholes-type expectation.
    """
    p = _merton_params(model)
    G = compute_G(model)
    lam_star, w0, w1, drift = _qstar_setup(p, G)
    tau = claim.T - t
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        val = np.maximum(s - claim.K, 0.0)
        return (val, (s >= claim.K).astype(float)) if with_delta else val
    j = np.arange(J_max + 1)
    pw = np.exp(j * math.log(lam_star * tau) - lam_star * tau - gammaln(j + 1)) if lam_star > 0 else (j == 0) * 1.0
    base = np.log(s) + (drift - 0.5 * p.sigma**2) * tau
    value = np.zeros(np.shape(base))
    delta_s = np.zeros(np.shape(base))
    last_abs = 0.0
    gross = 0.0
    for jj in range(J_max + 1):
        if pw[jj] == 0:
            continue
        a = np.arange(jj + 1)
        coef = pw[jj] * np.exp(gammaln(jj + 1) - gammaln(a + 1) - gammaln(jj - a + 1)) \
            * (w0 ** (jj - a)) * (w1 ** a)
        var = p.sigma**2 * tau + jj * p.delta**2
        lm = base[..., None] + jj * p.mu + a * p.delta**2
        v, b = _lognormal_call_terms(lm, var, claim.K)
        term = (v * coef).sum(axis=-1)
        value = value + term
        delta_s = delta_s + (b * coef).sum(axis=-1)
        gross += float(np.max(np.abs(v * coef).sum(axis=-1), initial=0.0))
        if jj >= J_max - 1:
            last_abs += float(np.max(np.abs(term), initial=0.0))
    scale = TRUNCATION_TOL * float(np.max(s, initial=1.0))
    if last_abs > scale:
        raise TruncationNotConverged(f"Q* series last term {last_abs:.3e} at J_max={J_max}")
    # the signed weights cancel; rounding grows with the gross sum of terms
    if gross * 4 * np.finfo(float).eps > scale:
        raise TruncationNotConverged(
            f"Q* series ill-conditioned (gross term sum {gross:.3e}); use the Monte-Carlo route")
    if with_delta:
        return value, delta_s / s
    return value


def qstar_series_price(model: MarketModel, claim: CallClaim, J_max=J_MAX_DEFAULT) -> PriceResult:
    price = float(qstar_value(0.0, model.s0, model, claim, J_max))
    return PriceResult(price, 0.0, "series", params=dict(model=model.name, K=claim.K, T=claim.T,
                                                         J_max=J_max, measure="qstar"))


def claim_coefficients(t, s, model: MarketModel, claim: CallClaim, measure: str = "P",
                       J_max=J_MAX_DEFAULT):
    """(F_t, beta_t, kappa_fn) for the call at (t, s).

    ``measure="P"`` uses conditional expectations under the physical measure;
    ``measure="qstar"`` uses the value process under Q*, for which
    ``beta = |sigma| s dV/ds`` and ``kappa(y) = V(y s) - V(s)``.
    """
    p = _merton_params(model)
    if measure == "P":
        F_t, itm = _p_series(claim.T - t, s, p, claim.K, J_max)
        beta = p.sigma * itm

        def kappa_fn(y):
            return kappa_claim_series(t, s, y, model, claim, J_max)
    elif measure == "qstar":
        F_t, dV = qstar_value(t, s, model, claim, J_max, with_delta=True)
        beta = p.sigma * np.asarray(s) * dV

        def kappa_fn(y):
            return qstar_value(t, np.asarray(y) * s, model, claim, J_max) - F_t
    else:
        raise InvalidParameter(f"unknown measure {measure!r}")
    return F_t, beta, (kappa_fn if model.has_jumps else None)


# ---------------------------------------------------------------------------
# Integrals against the jump law


def _gauss_hermite_lognormal(spec: LogNormal, n=GH_NODES):
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.exp(spec.mu + math.sqrt(2.0) * spec.delta * x), w / math.sqrt(math.pi)


def jump_quadrature(spec, n=GH_NODES):
    """Nodes y and probability weights approximating the law of y = e^Y."""
    if isinstance(spec, LogNormal):
        return _gauss_hermite_lognormal(spec, n)
    if isinstance(spec, Mixture):
        ys, ws = [], []
        for comp, wt in zip(spec.components, spec.weights):
            y, w = jump_quadrature(comp, n)
            ys.append(y)
            ws.append(w * wt)
        return np.concatenate(ys), np.concatenate(ws)
    raise UnsupportedModel(f"no quadrature rule for {type(spec).__name__}")


def jump_integral(model: MarketModel, fn) -> np.ndarray:
    """sum_l lambda_l E[(y_l - 1) fn(y_l)] by Gauss-Hermite quadrature.

    ``fn`` receives the node array broadcast along a trailing axis.
    """
    if not model.has_jumps:
        return 0.0
    total = 0.0
    for lam, spec in zip(model.lam, model.jumps):
        y, w = jump_quadrature(spec)
        vals = fn(y)
        total = total + lam * np.sum(w * (y - 1.0) * vals, axis=-1)
    return total


# ---------------------------------------------------------------------------
# Feedback-form optimal portfolio


def feedback_portfolio(t, x_t, F_t, beta_t, kappa_fn, model: MarketModel):
    """Optimal wealth fraction

        pi = [F_t alpha + sigma.beta + int gamma kappa dnu - x alpha] / [x (|sigma|^2 + int gamma^2 dnu)]

    A scalar ``beta_t`` is read as the Brownian integrand along sigma, so
    ``sigma.beta = |sigma| beta``. ``kappa_fn(y)`` is the jump integrand as a
    function of the absolute jump size (None when there are no jumps).
    """
    x_t = np.asarray(x_t, dtype=float)
    if np.any(x_t == 0):
        raise DivisionByZeroWealth("feedback portfolio undefined at zero wealth")
    beta_t = np.asarray(beta_t, dtype=float)
    if beta_t.ndim and beta_t.shape[-1] == model.d_B and model.d_B > 1:
        sigma_beta = beta_t @ np.asarray(model.sigma0)
    else:
        sigma_beta = math.sqrt(model.sigma_sq) * beta_t
    jump_term = 0.0
    if kappa_fn is not None and model.has_jumps:
        jump_term = jump_integral(model, lambda y: _kappa_on_nodes(kappa_fn, y, np.shape(x_t)))
    num = np.asarray(F_t) * model.alpha0 + sigma_beta + jump_term - x_t * model.alpha0
    return num / (x_t * model.total_variance())


def _kappa_on_nodes(kappa_fn, y, batch_shape):
    # evaluate kappa on every quadrature node, keeping nodes on the last axis
    if batch_shape:
        return np.stack([np.asarray(kappa_fn(yq)) for yq in y], axis=-1)
    return np.array([float(kappa_fn(yq)) for yq in y])


# ---------------------------------------------------------------------------
# Densities on a simulation grid


def _zstar_may_be_signed(model: MarketModel, G: float) -> bool:
    """Whether 1 + G (y - 1) <= 0 has positive probability for some jump."""
    if not model.has_jumps or G == 0:
        return False
    for lam, spec in zip(model.lam, model.jumps):
        if lam == 0:
            continue
        for leaf in (spec.components if isinstance(spec, Mixture) else (spec,)):
            if isinstance(leaf, LogNormal):
                # y ranges over (0, inf)
                if G < 0 or G > 1:
                    return True
            elif isinstance(leaf, DoubleExponential):
                if (G < 0 and leaf.p > 0) or (G > 1 and leaf.p < 1):
                    return True
    return False


def _check_zstar_supported(model: MarketModel, G: float) -> None:
    for spec in model.jumps:
        leaves = spec.components if isinstance(spec, Mixture) else (spec,)
        if any(isinstance(s, DoubleExponential) for s in leaves) and _zstar_may_be_signed(model, G):
            raise UnsupportedModel(
                "Z* is not a valid density for this double-exponential model: "
                f"G(e^Y - 1) > -1 fails with positive probability (G = {G:.4g}); "
                "use the deep-hedging route instead")


def simulate_Zstar(model: MarketModel, grid: GridSpec, increments: Increments):
    """Z* on the grid (M x (R+1)) and whether any jump factor was <= 0."""
    G = compute_G(model)
    _check_zstar_supported(model, G)
    dt = grid.dt
    sig = np.asarray(model.sigma0)
    k = model.compensators() if model.d_N else np.zeros(0)
    jump_comp = G * float(np.dot(model.lam, k)) if model.has_jumps else 0.0
    cont = (-0.5 * G * G * model.sigma_sq - jump_comp) * dt \
        + G * math.sqrt(dt) * np.einsum("jbi,b->ji", increments.B, sig)
    Z = np.empty((increments.M, grid.R + 1))
    Z[:, 0] = 0.0
    np.cumsum(cont, axis=1, out=Z[:, 1:])
    Z = np.exp(Z)
    signed = False
    if model.has_jumps:
        factor = np.ones((increments.M, grid.R))
        for l in range(model.d_N):
            factor *= increments.cell_product(l, lambda Y: 1.0 + G * np.expm1(Y))
        signed = bool(np.any(factor <= 0))
        Z[:, 1:] *= np.cumprod(factor, axis=1)
    return Z, signed


def simulate_ZM(model: MarketModel, grid: GridSpec, increments: Increments) -> np.ndarray:
    """Merton's density exp(-alpha^2 t / (2|sigma|^2) - (alpha/|sigma|^2) sigma.B(t))."""
    if not model.sigma_sq > 0:
        raise ZeroVolatility("Z^M needs nonzero volatility")
    dt = grid.dt
    sig = np.asarray(model.sigma0)
    theta = model.alpha0 / model.sigma_sq
    inc = -0.5 * model.alpha0**2 / model.sigma_sq * dt \
        - theta * math.sqrt(dt) * np.einsum("jbi,b->ji", increments.B, sig)
    Z = np.empty((increments.M, grid.R + 1))
    Z[:, 0] = 0.0
    np.cumsum(inc, axis=1, out=Z[:, 1:])
    return np.exp(Z)


# ---------------------------------------------------------------------------
# Monte-Carlo minimal-variance price


def _terminal_block(model: MarketModel, T: float, n: int, seed: int, block: int, G: float):
    """Exact draws of S(T) and Z*(T) for one block of paths."""
    sig = np.asarray(model.sigma0)
    rng_b = block_rng(seed, block, 0)
    W = math.sqrt(T) * rng_b.standard_normal((n, model.d_B))
    logS = np.full(n, math.log(model.s0) + (model.alpha0 - 0.5 * model.sigma_sq - model.jump_drift()) * T)
    logS += W @ sig
    logZ = (-0.5 * G * G * model.sigma_sq) * T + G * (W @ sig)
    Z_jump = np.ones(n)
    if model.has_jumps:
        k = model.compensators()
        logZ -= G * float(np.dot(model.lam, k)) * T
        rng_n = block_rng(seed, block, 1)
        for l, (lam, spec) in enumerate(zip(model.lam, model.jumps)):
            counts = rng_n.poisson(lam * T, n)
            Y = spec.sample(block_rng(seed, block, 2 + l), int(counts.sum()))
            idx = np.repeat(np.arange(n), counts)
            logS += np.bincount(idx, weights=Y, minlength=n)
            fac = 1.0 + G * np.expm1(Y)
            neg = np.bincount(idx, weights=(fac < 0).astype(float), minlength=n)
            zero = np.bincount(idx, weights=(fac == 0).astype(float), minlength=n)
            with np.errstate(divide="ignore"):
                la = np.bincount(idx, weights=np.log(np.abs(fac)), minlength=n)
            part = np.exp(la) * np.where(neg % 2 == 1, -1.0, 1.0)
            part[zero > 0] = 0.0
            Z_jump *= part
    return np.exp(logS), np.exp(logZ) * Z_jump


def exact_terminal_samples(model: MarketModel, T: float, M: int, seed: int, block: int = 1 << 16):
    """Exact draws of (S(T), Z*(T)) from their closed forms."""
    G = compute_G(model) if model.total_variance() > 0 else 0.0
    S, Z = [], []
    for b, start in enumerate(range(0, M, block)):
        s_b, z_b = _terminal_block(model, T, min(block, M - start), seed, b, G)
        S.append(s_b)
        Z.append(z_b)
    return np.concatenate(S), np.concatenate(Z)


def mc_minimal_variance_price(model: MarketModel, claim: CallClaim, M: int, seed: int,
                              grid: GridSpec | None = None, scheme: str = "exact",
                              block: int = 1 << 16) -> PriceResult:
    """Estimate E[F Z*(T)].

    ``scheme="exact"`` samples S(T) and Z*(T) from their closed forms (no
    time-stepping bias); ``"direct"``/``"log"`` reuse grid paths.
    """
    if M < 1000:
        raise InvalidParameter("use at least 1000 paths")
    G = compute_G(model)
    _check_zstar_supported(model, G)
    signed = False
    if scheme == "exact":
        s1 = s2 = 0.0
        for b, start in enumerate(range(0, M, block)):
            n = min(block, M - start)
            S_T, Z_T = _terminal_block(model, claim.T, n, seed, b, G)
            signed |= bool(np.any(Z_T <= 0))
            v = claim.payoff(S_T) * Z_T
            s1 += float(v.sum())
            s2 += float((v * v).sum())
        mean = s1 / M
        var = max(s2 / M - mean * mean, 0.0) * M / (M - 1)
    else:
        grid = grid or GridSpec(claim.T, 150)
        inc = sample_increments(model, grid, M, seed)
        S = simulate_stock(model, grid, inc, scheme)
        Z, signed = simulate_Zstar(model, grid, inc)
        v = claim.payoff(S[:, -1]) * Z[:, -1]
        mean, var = float(v.mean()), float(v.var(ddof=1))
    return PriceResult(mean, math.sqrt(var / M), "mc", M, seed, signed,
                       params=dict(model=model.name, K=claim.K, T=claim.T, scheme=scheme, G=G))


def mc_expectation_Z(model: MarketModel, T: float, M: int, seed: int, which: str = "qstar"):
    """Sample mean and standard error of Z*(T) (or Z^M(T)) from exact draws."""
    G = compute_G(model)
    _check_zstar_supported(model, G)
    if which == "qstar":
        _, Z = _terminal_block(model, T, M, seed, 0, G)
    elif which == "merton":
        if not model.sigma_sq > 0:
            raise ZeroVolatility("Z^M needs nonzero volatility")
        W = math.sqrt(T) * block_rng(seed, 0, 0).standard_normal((M, model.d_B))
        th = model.alpha0 / model.sigma_sq
        Z = np.exp(-0.5 * model.alpha0**2 / model.sigma_sq * T - th * (W @ np.asarray(model.sigma0)))
    else:
        raise InvalidParameter(which)
    return float(Z.mean()), float(Z.std(ddof=1) / math.sqrt(M))


# ---------------------------------------------------------------------------
# Ito cross-check


def crosscheck_price(model: MarketModel, claim: CallClaim, grid: GridSpec, M: int,
                     J_max=J_MAX_DEFAULT, seed: int = 0) -> PriceResult:
    """Minimal-variance price via

        z = E[F] + int_0^T G { sigma E[Z*_t beta(t)] + int gamma E[kappa(t, y) Z*_t] nu(dy) } dt

    with the time integral on the grid (left endpoints), the nu-integral by
    Gauss-Hermite quadrature and beta, kappa from the P-series. The whole
    right-hand side is evaluated per path so its standard error is exact.
    """
    p = _merton_params(model)
    G = compute_G(model)
    inc = sample_increments(model, grid, M, seed)
    S = simulate_stock(model, grid, inc, scheme="log")
    Z, signed = simulate_Zstar(model, grid, inc)
    per_path = claim.payoff(S[:, -1]).astype(float)
    dt = grid.dt
    times = grid.times()
    for i in range(grid.R):
        t = float(times[i])
        s = S[:, i]
        beta = beta_series(t, s, model, claim, J_max)
        h = p.sigma * beta
        if model.has_jumps:
            h = h + jump_integral(model, lambda y: kappa_claim_series(
                t, s[:, None], y[None, :], model, claim, J_max))
        per_path += dt * G * Z[:, i] * h
    price = float(per_path.mean())
    stderr = float(per_path.std(ddof=1) / math.sqrt(M))
    return PriceResult(price, stderr, "crosscheck", M, seed, signed,
                       params=dict(model=model.name, K=claim.K, T=claim.T, R=grid.R, J_max=J_max))


# ---------------------------------------------------------------------------
# Parameter surfaces (price vs two model parameters)


def price_surface(param1: str, values1, param2: str, values2, base: dict, K=0.5, T=1.0,
                  M=100_000, seed=0, mv_route: str = "mc"):
    """Rows ``(p1, p2, price_merton, price_mv, diff)`` over a Merton parameter grid.

    ``base`` holds alpha0, sigma0, lam, mu, delta, s0; ``param1``/``param2``
    name the keys being varied.
    """
    from .market import merton_model

    rows = []
    claim = CallClaim(K, T)
    for v1 in values1:
        for v2 in values2:
            kw = dict(base)
            kw[param1], kw[param2] = float(v1), float(v2)
            model = merton_model(**kw)
            pm = merton_price_model(model, claim).price
            if mv_route == "series":
                pv = qstar_series_price(model, claim).price
            else:
                pv = mc_minimal_variance_price(model, claim, M, seed).price
            rows.append((float(v1), float(v2), pm, pv, pv - pm))
    return rows
