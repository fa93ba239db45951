"""Hedging network: softplus price head, two stacked LSTM layers, linear
portfolio head, plus Adam and a bit-exact text checkpoint format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import CheckpointMismatch, ShapeMismatch
from .market import GridSpec, Increments, MarketModel, StepTerms, direct_update, log_update, simulate_stock
from .tensor import Tape, Tensor


@dataclass
class LinearLayer:
    A: np.ndarray  # out x in
    b: np.ndarray  # out

    @property
    def shape(self):
        return self.A.shape


@dataclass
class LstmCell:
    """Gate parameters stacked in the order input, forget, output, candidate.

    ``Wx`` is (4 d_h x d_in), ``Wh`` is (4 d_h x d_h) and ``b`` has length 4 d_h.
    """

    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]


@dataclass
class HedgeNet:
    price_head: LinearLayer
    lstm1: LstmCell
    lstm2: LstmCell
    out_head: LinearLayer

    @property
    def hidden(self) -> int:
        return self.lstm1.hidden

    def params(self) -> dict:
        return {
            "price_head.A": self.price_head.A, "price_head.b": self.price_head.b,
            "lstm1.Wx": self.lstm1.Wx, "lstm1.Wh": self.lstm1.Wh, "lstm1.b": self.lstm1.b,
            "lstm2.Wx": self.lstm2.Wx, "lstm2.Wh": self.lstm2.Wh, "lstm2.b": self.lstm2.b,
            "out_head.A": self.out_head.A, "out_head.b": self.out_head.b,
        }

    @classmethod
    def from_params(cls, p: dict) -> "HedgeNet":
        return cls(
            LinearLayer(p["price_head.A"], p["price_head.b"]),
            LstmCell(p["lstm1.Wx"], p["lstm1.Wh"], p["lstm1.b"]),
            LstmCell(p["lstm2.Wx"], p["lstm2.Wh"], p["lstm2.b"]),
            LinearLayer(p["out_head.A"], p["out_head.b"]),
        )

    def copy(self) -> "HedgeNet":
        return HedgeNet.from_params({k: v.copy() for k, v in self.params().items()})


def init_params(d: int, seed: int) -> HedgeNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases except
    the LSTM forget gates, which start at 1."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x4E4E])))

    def uni(shape, fan_in):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, shape)

    def cell(d_in):
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0
        return LstmCell(uni((4 * d, d_in), d_in), uni((4 * d, d), d), b)

    price = LinearLayer(uni((1, d), d), np.zeros(1))
    l1 = cell(1)
    l2 = cell(d)
    out = LinearLayer(uni((1, d), d), np.zeros(1))
    return HedgeNet(price, l1, l2, out)


# ---------------------------------------------------------------------------
# Forward pieces on tensors


def bind(net: HedgeNet, tape: Tape | None) -> dict:
    """Wrap parameters as tape leaves (training) or constants (evaluation)."""
    if tape is None:
        return {k: Tensor(v) for k, v in net.params().items()}
    return {k: tape.leaf(v) for k, v in net.params().items()}


def linear_forward(A: Tensor, b: Tensor, y: Tensor) -> Tensor:
    """Row-wise ``A y + b`` for a batch ``y`` of shape (n x in)."""
    if y.shape[-1] != A.shape[1]:
        raise ShapeMismatch(f"linear: input dim {y.shape[-1]} vs weight {A.shape}")
    return tn.add_bias(tn.matmul(y, tn.transpose(A)), b)


def price_head_forward(A: Tensor, b: Tensor, s0: float) -> Tensor:
    """x0 = softplus(A [s0,...,s0] + b), returned as a 1 x 1 tensor."""
    d = A.shape[1]
    y = Tensor(np.full((1, d), float(s0)))
    return tn.softplus(linear_forward(A, b, y))


@dataclass
class _CellTensors:
    WxT: Tensor
    WhT: Tensor
    b: Tensor
    d: int


def _cell_tensors(Wx: Tensor, Wh: Tensor, b: Tensor) -> _CellTensors:
    return _CellTensors(tn.transpose(Wx), tn.transpose(Wh), b, Wh.shape[1])


def _lstm(cell: _CellTensors, x: Tensor, h: Tensor, c: Tensor):
    d = cell.d
    z = tn.add_bias(tn.add(tn.matmul(x, cell.WxT), tn.matmul(h, cell.WhT)), cell.b)
    gates = tn.sigmoid(tn.columns(z, 0, 3 * d))
    g = tn.tanh(tn.columns(z, 3 * d, 4 * d))
    i = tn.columns(gates, 0, d)
    f = tn.columns(gates, d, 2 * d)
    o = tn.columns(gates, 2 * d, 3 * d)
    c_new = tn.add(tn.mul(f, c), tn.mul(i, g))
    h_new = tn.mul(o, tn.tanh(c_new))
    return h_new, c_new


def lstm_step(Wx: Tensor, Wh: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor):
    """One standard LSTM step (sigmoid gates, tanh candidate, no peepholes).

    ``x`` is (n x d_in), ``h`` and ``c`` are (n x d_h). Returns ``(h', c')``.
    """
    d = Wh.shape[1]
    if Wx.shape[0] != 4 * d or x.shape[1] != Wx.shape[1] or h.shape[1] != d or c.shape != h.shape:
        raise ShapeMismatch("lstm_step: inconsistent shapes")
    return _lstm(_cell_tensors(Wx, Wh, b), x, h, c)


@dataclass
class ForwardResult:
    x0: Tensor  # 1 x 1
    terminal: Tensor  # M x 1 terminal wealth
    pi: np.ndarray  # M x R
    wealth: np.ndarray  # M x (R+1)
    bound: dict = field(default_factory=dict)


def hedge_forward(net: HedgeNet, increments: Increments, model: MarketModel, grid: GridSpec,
                  scheme: str = "direct", tape: Tape | None = None) -> ForwardResult:
    """Unroll the network over the grid, producing x0, the portfolio and the
    wealth paths. Records on ``tape`` when given."""
    if increments.R != grid.R or increments.B.shape[1] != model.d_B or increments.J.shape[1] != model.d_N:
        raise ShapeMismatch("increments do not match model/grid dimensions")
    P = bind(net, tape)
    M, R, d = increments.M, grid.R, net.hidden
    terms = StepTerms.build(increments, model, grid)

    x0 = price_head_forward(P["price_head.A"], P["price_head.b"], model.s0)
    cell1 = _cell_tensors(P["lstm1.Wx"], P["lstm1.Wh"], P["lstm1.b"])
    cell2 = _cell_tensors(P["lstm2.Wx"], P["lstm2.Wh"], P["lstm2.b"])
    outAT = tn.transpose(P["out_head.A"])
    out_b = P["out_head.b"]

    x = tn.broadcast_rows(x0, M)
    y = tn.log(x) if scheme == "log" else None
    zeros = Tensor(np.zeros((M, d)))
    h1 = c1 = h2 = c2 = zeros
    pis = np.empty((M, R))
    wealth = np.empty((M, R + 1))
    wealth[:, 0] = x.value[:, 0]
    for i in range(R):
        h1, c1 = _lstm(cell1, x, h1, c1)
        h2, c2 = _lstm(cell2, h1, h2, c2)
        pi = tn.add_bias(tn.matmul(h2, outAT), out_b)
        pis[:, i] = pi.value[:, 0]
        diff = terms.diffusion[:, i:i + 1]
        jump = terms.jump[:, i:i + 1]
        if scheme == "direct":
            x = direct_update(x, pi, terms.drift_dt, diff, jump)
        elif scheme == "log":
            y = log_update(y, pi, terms.drift_dt, terms.var_dt, diff, jump, log=tn.log)
            x = tn.exp(y)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        wealth[:, i + 1] = x.value[:, 0]
    return ForwardResult(x0=x0, terminal=x, pi=pis, wealth=wealth, bound=P)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_HEADER = "qhedge-checkpoint 1"


def save_checkpoint(path, net: HedgeNet, meta: dict | None = None) -> None:
    """Text format: header, ``meta key value`` lines, then per tensor a
    ``tensor name dims...`` line followed by its hex-encoded values."""
    lines = [CHECKPOINT_HEADER, f"meta hidden {net.hidden}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key} {value}")
    for name, arr in net.params().items():
        lines.append("tensor " + name + " " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(float(v).hex() for v in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[HedgeNet, dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise CheckpointMismatch(f"{path}: not a checkpoint (bad header)")
    meta, params = {}, {}
    it = iter(lines[1:])
    for line in it:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, *dims = rest.split(" ")
            shape = tuple(int(s) for s in dims)
            vals = next(it).split()
            arr = np.array([float.fromhex(v) for v in vals], dtype=np.float64)
            if arr.size != math.prod(shape):
                raise CheckpointMismatch(f"{name}: {arr.size} values for shape {shape}")
            params[name] = arr.reshape(shape)
        elif line.strip():
            raise CheckpointMismatch(f"unrecognised line: {line[:40]}")
    try:
        net = HedgeNet.from_params(params)
    except KeyError as e:
        raise CheckpointMismatch(f"missing tensor {e}") from None
    return net, meta


# ---------------------------------------------------------------------------
# Gradient check for the whole unrolled network


def network_grad_check(net: HedgeNet, increments: Increments, model: MarketModel, grid: GridSpec,
                       K: float, scheme: str = "direct", h: float = 1e-5) -> dict:
    """Per-parameter max relative error between tape gradients of the
    quadratic hedging loss and central differences over every entry."""
    stock = simulate_stock(model, grid, increments, scheme)[:, -1:]
    payoff = np.maximum(stock - K, 0.0)

    def loss_value(params):
        out = hedge_forward(HedgeNet.from_params(params), increments, model, grid, scheme)
        return 0.5 * float(np.mean((out.wealth[:, -1:] - payoff) ** 2))

    tape = Tape()
    out = hedge_forward(net, increments, model, grid, scheme, tape)
    loss = tn.scale(tn.mean(tn.square(tn.sub(out.terminal, Tensor(payoff)))), 0.5)
    grads = tn.backward(loss)
    errors = {}
    for name, value in net.params().items():
        analytic = grads.of(out.bound[name])
        numeric = np.empty_like(value)
        for idx in np.ndindex(value.shape):
            p = {k: v.copy() for k, v in net.params().items()}
            p[name][idx] += h
            up = loss_value(p)
            p[name][idx] -= 2 * h
            numeric[idx] = (up - loss_value(p)) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return errors
