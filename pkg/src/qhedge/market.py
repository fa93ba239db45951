"""Jump-diffusion market models and batched Euler-Maruyama path simulation.

The stock follows

    dS = S [alpha0 dt + sigma0 . dB + gamma0 * sum_l (y_l - 1) dN~_l]

with zero interest rate. Paths are produced on an equidistant grid with
either the direct update

    x_{i+1} = x_i + x_i pi_i [(alpha0 - lambda.k) dt + sqrt(dt) B_i . sigma0 + gamma0 J_i]

or its logarithmic counterpart, which keeps every value positive.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import (
    EmptyMixture,
    InvalidParameter,
    LogArgumentNonpositive,
    MomentUndefined,
    NonpositiveValue,
)

# Paths are generated in fixed-size blocks, each with its own Philox stream,
# so the result never depends on how the work is partitioned.
BLOCK_PATHS = 1024

_KIND_BROWNIAN = 0
_KIND_COUNTS = 1
_KIND_MARKS = 2  # + component index


def block_rng(seed: int, block: int, kind: int) -> np.random.Generator:
    """Independent counter-based stream for one (seed, block, kind) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block, kind])))


def derive_seed(seed: int, *labels: int) -> int:
    """Expand a top-level seed into a child seed (64-bit)."""
    ss = np.random.SeedSequence([seed, *labels])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Jump laws


@dataclass(frozen=True)
class LogNormal:
    """Log jump size Y ~ N(mu, delta^2); relative jump e^Y - 1."""

    mu: float
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidParameter(f"LogNormal delta must be > 0, got {self.delta}")

    def exp_moment(self, n: int) -> float:
        return math.exp(n * self.mu + 0.5 * n * n * self.delta**2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mu, self.delta, n)


@dataclass(frozen=True)
class DoubleExponential:
    """Kou law: Y ~ Exp(eta1) with probability p, -Exp(eta2) otherwise."""

    eta1: float
    eta2: float
    p: float

    def __post_init__(self):
        if not self.eta1 > 1:
            raise InvalidParameter(f"eta1 must be > 1, got {self.eta1}")
        if not self.eta2 > 0:
            raise InvalidParameter(f"eta2 must be > 0, got {self.eta2}")
        if not 0 <= self.p <= 1:
            raise InvalidParameter(f"p must lie in [0, 1], got {self.p}")

    def exp_moment(self, n: int) -> float:
        if self.p > 0 and self.eta1 <= n:
            raise MomentUndefined(f"E[e^({n}Y)] is infinite for eta1={self.eta1}")
        up = self.p * self.eta1 / (self.eta1 - n) if self.p > 0 else 0.0
        return up + (1 - self.p) * self.eta2 / (self.eta2 + n)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        up = rng.random(n) < self.p
        mag = rng.standard_exponential(n)
        return np.where(up, mag / self.eta1, -mag / self.eta2)


@dataclass(frozen=True)
class Mixture:
    """Categorical mixture of jump laws (the single-component form of a sum
    of independent compound Poisson processes)."""

    components: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.components) == 0:
            raise EmptyMixture("mixture needs at least one component")
        if len(self.components) != len(self.weights):
            raise InvalidParameter("components and weights differ in length")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0):
            raise InvalidParameter(f"weights must be a probability vector, got {self.weights}")

    def exp_moment(self, n: int) -> float:
        return sum(w * c.exp_moment(n) for c, w in zip(self.components, self.weights))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cat = rng.choice(len(self.components), size=n, p=np.asarray(self.weights))
        out = np.empty(n)
        for c, comp in enumerate(self.components):
            sel = cat == c
            out[sel] = comp.sample(rng, int(sel.sum()))
        return out


JumpSpec = Union[LogNormal, DoubleExponential, Mixture]


@dataclass(frozen=True)
class JumpMoments:
    k: float  # E[y - 1]
    m: float  # E[(y - 1)^2]


def jump_compensator(spec: JumpSpec) -> float:
    return spec.exp_moment(1) - 1.0


def jump_moments(spec: JumpSpec) -> JumpMoments:
    e1 = spec.exp_moment(1)
    e2 = spec.exp_moment(2)
    return JumpMoments(k=e1 - 1.0, m=e2 - 2.0 * e1 + 1.0)


def mix_compound_poisson(intensities: Sequence[float], specs: Sequence[JumpSpec]):
    """Collapse independent compound Poisson components into one.

    Returns ``(lambda_mix, spec)`` where ``spec`` is a :class:`Mixture` with
    weights ``lambda_l / lambda_mix`` (or the original spec for a single
    component).
    """
    if len(intensities) == 0:
        raise EmptyMixture("no components to mix")
    if len(intensities) != len(specs):
        raise InvalidParameter("intensities and specs differ in length")
    if any(not lam > 0 for lam in intensities):
        raise InvalidParameter("all intensities must be > 0")
    total = float(sum(intensities))
    if len(specs) == 1:
        return total, specs[0]
    weights = tuple(float(lam) / total for lam in intensities)
    return total, Mixture(tuple(specs), weights)


# ---------------------------------------------------------------------------
# Model and grid


@dataclass(frozen=True)
class MarketModel:
    alpha0: float
    sigma0: tuple
    gamma0: int = 0
    lam: tuple = ()
    jumps: tuple = ()
    s0: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "sigma0", tuple(float(s) for s in np.atleast_1d(self.sigma0)))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "jumps", tuple(self.jumps))
        if len(self.sigma0) < 1:
            raise InvalidParameter("need at least one Brownian component")
        if self.gamma0 not in (0, 1):
            raise InvalidParameter(f"gamma0 must be 0 or 1, got {self.gamma0}")
        if len(self.lam) != len(self.jumps):
            raise InvalidParameter("lambda and jumps must have equal length")
        if any(v < 0 for v in self.lam):
            raise InvalidParameter("jump intensities must be >= 0")
        if not self.s0 > 0:
            raise InvalidParameter("s0 must be > 0")

    @property
    def d_B(self) -> int:
        return len(self.sigma0)

    @property
    def d_N(self) -> int:
        return len(self.lam)

    @property
    def has_jumps(self) -> bool:
        return self.gamma0 == 1 and any(v > 0 for v in self.lam)

    @property
    def sigma_sq(self) -> float:
        return float(sum(s * s for s in self.sigma0))

    def compensators(self) -> np.ndarray:
        return np.array([jump_compensator(spec) for spec in self.jumps])

    def jump_drift(self) -> float:
        """lambda^T k, the compensator subtracted from the drift."""
        if self.gamma0 == 0 or self.d_N == 0:
            return 0.0
        return float(np.dot(self.lam, self.compensators()))

    def jump_variance(self) -> float:
        """gamma0 * sum_l lambda_l m_l."""
        if self.gamma0 == 0:
            return 0.0
        total = 0.0
        for lam, spec in zip(self.lam, self.jumps):
            if lam > 0:
                try:
                    total += lam * jump_moments(spec).m
                except MomentUndefined:
                    return math.inf
        return total

    def total_variance(self) -> float:
        return self.sigma_sq + self.jump_variance()


@dataclass(frozen=True)
class GridSpec:
    T: float
    R: int

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidParameter("T must be > 0")
        if int(self.R) != self.R or self.R < 1:
            raise InvalidParameter("R must be a positive integer")
        object.__setattr__(self, "R", int(self.R))

    @property
    def dt(self) -> float:
        return self.T / self.R

    def times(self) -> np.ndarray:
        return np.arange(self.R + 1) * self.T / self.R


# ---------------------------------------------------------------------------
# Preset models used throughout the experiments


def bs_model(alpha0=0.3, sigma0=0.2, s0=1.0) -> MarketModel:
    return MarketModel(alpha0, (sigma0,), s0=s0, name="bs")


def bsmb_model(alpha0=0.3, sigma0=(0.11, 0.16, 0.05), s0=1.0) -> MarketModel:
    return MarketModel(alpha0, tuple(sigma0), s0=s0, name="bsmb")


def merton_model(alpha0=0.2, sigma0=0.2, lam=5.0, mu=-0.2, delta=0.05, s0=1.0) -> MarketModel:
    return MarketModel(alpha0, (sigma0,), 1, (lam,), (LogNormal(mu, delta),), s0, name="merton")


def merton_multi_model(alpha0=0.2, sigma0=0.2, lam=(3.0, 5.0, 2.0), mu=(0.1, 0.1, 0.05),
                       delta=(0.05, 0.02, 0.01), s0=1.0) -> MarketModel:
    specs = tuple(LogNormal(m, d) for m, d in zip(mu, delta))
    return MarketModel(alpha0, (sigma0,), 1, tuple(lam), specs, s0, name="merton-multi")


def merton_mixed_model(alpha0=0.2, sigma0=0.2, lam=(3.0, 5.0, 2.0), mu=(0.1, 0.1, 0.05),
                       delta=(0.05, 0.02, 0.01), s0=1.0) -> MarketModel:
    lam_mix, spec = mix_compound_poisson(lam, [LogNormal(m, d) for m, d in zip(mu, delta)])
    return MarketModel(alpha0, (sigma0,), 1, (lam_mix,), (spec,), s0, name="merton-mixed")


def kou_model(alpha0=0.15, sigma0=0.2, lam=10.0, eta1=50.0, eta2=25.0, p=0.3, s0=1.0) -> MarketModel:
    return MarketModel(alpha0, (sigma0,), 1, (lam,), (DoubleExponential(eta1, eta2, p),), s0, name="kou")


# ---------------------------------------------------------------------------
# Increments


@dataclass
class Increments:
    """Standard-normal draws and per-step jump marks.

    ``J[j, l, i]`` is ``exp(sum of log-jumps of component l in step i) - 1``
    (zero when no jump occurred); ``counts`` holds the number of jumps and
    ``marks[l]`` the individual log-jump sizes of component ``l`` in
    (path, step) order.
    """

    B: np.ndarray  # M x d_B x R
    J: np.ndarray  # M x d_N x R
    counts: np.ndarray  # M x d_N x R
    marks: list = field(default_factory=list)
    seed: int = 0

    @property
    def M(self) -> int:
        return self.B.shape[0]

    @property
    def R(self) -> int:
        return self.B.shape[2]

    def cell_product(self, l: int, fn) -> np.ndarray:
        """Product over the jumps of component ``l`` in each cell of ``fn(Y)``.

        Cells without jumps give 1. Sign is tracked separately so factors
        that are zero or negative are represented exactly.
        """
        counts = self.counts[:, l, :]
        if counts.sum() == 0:
            return np.ones(counts.shape)
        vals = fn(self.marks[l])
        idx = np.repeat(np.arange(counts.size), counts.ravel())
        neg = np.bincount(idx, weights=(vals < 0).astype(float), minlength=counts.size)
        zero = np.bincount(idx, weights=(vals == 0).astype(float), minlength=counts.size)
        with np.errstate(divide="ignore"):
            logabs = np.bincount(idx, weights=np.log(np.abs(vals)), minlength=counts.size)
        out = np.exp(logabs) * np.where(neg % 2 == 1, -1.0, 1.0)
        out[zero > 0] = 0.0
        return out.reshape(counts.shape)


def sample_increments(model: MarketModel, grid: GridSpec, M: int, seed: int) -> Increments:
    """Draw Brownian and jump increments for ``M`` paths.

    Jumps of component ``l`` arrive per step as Poisson(lambda_l dt) counts;
    each occurrence carries an independent log-size from the component's law.
    """
    if M < 1:
        raise InvalidParameter("M must be >= 1")
    R, d_B, d_N = grid.R, model.d_B, model.d_N
    dt = grid.dt
    B = np.empty((M, d_B, R))
    counts = np.zeros((M, d_N, R), dtype=np.int64)
    marks_blocks = [[] for _ in range(d_N)]
    lam_dt = np.array(model.lam) * dt if model.gamma0 else np.zeros(d_N)
    for b, start in enumerate(range(0, M, BLOCK_PATHS)):
        n = min(BLOCK_PATHS, M - start)
        B[start:start + n] = block_rng(seed, b, _KIND_BROWNIAN).standard_normal((n, d_B, R))
        if d_N == 0 or not lam_dt.any():
            continue
        counts[start:start + n] = block_rng(seed, b, _KIND_COUNTS).poisson(
            lam_dt[None, :, None], size=(n, d_N, R))
        for l, spec in enumerate(model.jumps):
            n_jumps = int(counts[start:start + n, l, :].sum())
            marks_blocks[l].append(spec.sample(block_rng(seed, b, _KIND_MARKS + l), n_jumps))
    marks = [np.concatenate(mb) if mb else np.empty(0) for mb in marks_blocks]
    J = np.zeros((M, d_N, R))
    for l in range(d_N):
        c = counts[:, l, :]
        if c.sum():
            idx = np.repeat(np.arange(c.size), c.ravel())
            sumY = np.bincount(idx, weights=marks[l], minlength=c.size).reshape(c.shape)
            J[:, l, :] = np.where(c > 0, np.expm1(sumY), 0.0)
    return Increments(B=B, J=J, counts=counts, marks=marks, seed=seed)


# ---------------------------------------------------------------------------
# Wealth / stock evolution


@dataclass
class StepTerms:
    """Per-step pieces of the update rule, each an M x R array (or scalar)."""

    drift_dt: float  # (alpha0 - lambda.k) dt
    var_dt: float  # sigma0.sigma0 dt
    diffusion: np.ndarray  # sqrt(dt) B_i . sigma0
    jump: np.ndarray  # gamma0 * sum_l J_i^l

    @classmethod
    def build(cls, increments: Increments, model: MarketModel, grid: GridSpec) -> "StepTerms":
        dt = grid.dt
        sig = np.asarray(model.sigma0)
        diffusion = math.sqrt(dt) * np.einsum("jbi,b->ji", increments.B, sig)
        if model.gamma0 and model.d_N:
            jump = increments.J.sum(axis=1)
        else:
            jump = np.zeros_like(diffusion)
        return cls((model.alpha0 - model.jump_drift()) * dt, model.sigma_sq * dt, diffusion, jump)


def direct_update(x, pi, drift_dt, diffusion, jump):
    """One step of the direct Euler rule. Works for arrays and tensors."""
    return x + x * pi * (drift_dt + diffusion + jump)


def log_update(y, pi, drift_dt, var_dt, diffusion, jump, log=np.log):
    """One step of the log-wealth Euler rule. Works for arrays and tensors."""
    return y + pi * drift_dt - (0.5 * var_dt) * (pi * pi) + pi * diffusion + log(pi * jump + 1.0)


def nonpositive_paths(values: np.ndarray) -> np.ndarray:
    """Boolean mask of paths (rows) that ever hit a value <= 0 or NaN."""
    return ~np.all(values > 0, axis=1)


def evolve_wealth(increments: Increments, model: MarketModel, grid: GridSpec, x0: float,
                  pi, scheme: str = "direct", strict: bool = True) -> np.ndarray:
    """Wealth paths M x (R+1) under the portfolio fractions ``pi`` (M x R).

    With ``strict`` a path reaching a nonpositive value (direct scheme) or a
    nonpositive log argument (log scheme) raises; otherwise those entries are
    left as computed (direct) or NaN (log) and can be found with
    :func:`nonpositive_paths`.
    """
    if not x0 > 0:
        raise InvalidParameter("x0 must be > 0")
    M, R = increments.M, grid.R
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (M, R))
    if not np.all(np.isfinite(pi)):
        raise InvalidParameter("portfolio contains non-finite values")
    terms = StepTerms.build(increments, model, grid)
    out = np.empty((M, R + 1))
    if scheme == "direct":
        out[:, 0] = x0
        for i in range(R):
            out[:, i + 1] = direct_update(out[:, i], pi[:, i], terms.drift_dt,
                                          terms.diffusion[:, i], terms.jump[:, i])
        if strict and nonpositive_paths(out).any():
            raise NonpositiveValue(f"{int(nonpositive_paths(out).sum())} path(s) hit a value <= 0")
    elif scheme == "log":
        arg = pi * terms.jump + 1.0
        bad = arg <= 0
        if strict and bad.any():
            raise LogArgumentNonpositive(f"{int(bad.any(axis=1).sum())} path(s) with gamma0*pi*J + 1 <= 0")
        with np.errstate(invalid="ignore", divide="ignore"):
            logj = np.where(bad, np.nan, np.log(np.where(bad, 1.0, arg)))
        steps = pi * terms.drift_dt - 0.5 * terms.var_dt * pi * pi + pi * terms.diffusion + logj
        out[:, 0] = 0.0
        np.cumsum(steps, axis=1, out=out[:, 1:])
        out = x0 * np.exp(out)
    else:
        raise InvalidParameter(f"unknown scheme {scheme!r}")
    return out


def simulate_stock(model: MarketModel, grid: GridSpec, increments: Increments,
                   scheme: str = "direct", strict: bool = True) -> np.ndarray:
    return evolve_wealth(increments, model, grid, model.s0, 1.0, scheme, strict)


@dataclass
class PathBatch:
    stock: np.ndarray
    wealth: np.ndarray
    increments: Increments
    grid: GridSpec


# ---------------------------------------------------------------------------
# Export formats


def write_paths_csv(path, batch: PathBatch) -> None:
    """CSV with header ``path,step,time,stock,wealth``."""
    times = batch.grid.times()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "time", "stock", "wealth"])
        for j in range(batch.stock.shape[0]):
            for i in range(batch.grid.R + 1):
                w.writerow([j, i, repr(float(times[i])), repr(float(batch.stock[j, i])),
                            repr(float(batch.wealth[j, i]))])


INCREMENTS_MAGIC = b"QHIN"
INCREMENTS_VERSION = 1


def write_increments(path, inc: Increments) -> None:
    """Binary layout (little-endian):

    ``QHIN`` | version u32 | M, d_B, d_N, R, seed u64 | B f64[M*d_B*R] |
    counts u32[M*d_N*R] | per component: n u64, marks f64[n]
    """
    M, d_B, R = inc.B.shape
    d_N = inc.J.shape[1]
    with open(path, "wb") as fh:
        fh.write(INCREMENTS_MAGIC)
        fh.write(struct.pack("<I", INCREMENTS_VERSION))
        fh.write(struct.pack("<5Q", M, d_B, d_N, R, inc.seed))
        fh.write(inc.B.astype("<f8").tobytes())
        fh.write(inc.counts.astype("<u4").tobytes())
        for l in range(d_N):
            fh.write(struct.pack("<Q", inc.marks[l].size))
            fh.write(inc.marks[l].astype("<f8").tobytes())


def read_increments(path) -> Increments:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != INCREMENTS_MAGIC:
        raise InvalidParameter("not an increments file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != INCREMENTS_VERSION:
        raise InvalidParameter(f"unsupported increments version {version}")
    M, d_B, d_N, R, seed = struct.unpack_from("<5Q", data, 8)
    off = 48
    nB = M * d_B * R
    B = np.frombuffer(data, "<f8", nB, off).reshape(M, d_B, R).copy()
    off += 8 * nB
    nC = M * d_N * R
    counts = np.frombuffer(data, "<u4", nC, off).reshape(M, d_N, R).astype(np.int64)
    off += 4 * nC
    marks = []
    J = np.zeros((M, d_N, R))
    for l in range(d_N):
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        mk = np.frombuffer(data, "<f8", n, off).copy()
        off += 8 * n
        marks.append(mk)
        c = counts[:, l, :]
        if n:
            idx = np.repeat(np.arange(c.size), c.ravel())
            sumY = np.bincount(idx, weights=mk, minlength=c.size).reshape(c.shape)
            J[:, l, :] = np.where(c > 0, np.expm1(sumY), 0.0)
    return Increments(B=B, J=J, counts=counts, marks=marks, seed=seed)
