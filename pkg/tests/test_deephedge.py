import csv
import math

import numpy as np
import pytest

from qhedge import market as mk
from qhedge import nn
from qhedge import pricing as pr
from qhedge import deephedge as dh
from qhedge.errors import ConfigInvalid, NonFiniteLoss, ShapeMismatch

CLAIM = pr.CallClaim(0.5, 1.0)
TINY = dict(epochs=15, batch=32, hidden=4, R=5, log_every=0)


def test_loss_examples():
    s = np.array([1.5, 0.4])
    assert dh.quadratic_loss(np.maximum(s - 0.5, 0), s, 0.5) == 0.0
    assert dh.quadratic_loss(np.array([1.0, 0.0]), s, 0.5) == 0.0
    assert dh.quadratic_loss(np.array([1.0]), np.array([2.0]), 0.5) == pytest.approx(0.125)
    with pytest.raises(ShapeMismatch):
        dh.quadratic_loss(np.ones(3), np.ones(2), 0.5)


def test_loss_on_tensor_matches_array():
    x = np.array([[0.3], [0.9], [0.1]])
    s = np.array([[1.0], [1.2], [0.2]])
    assert float(dh.quadratic_loss(nn.Tensor(x), s, 0.5).value) == pytest.approx(dh.quadratic_loss(x, s, 0.5))


def test_l2_examples():
    phi = np.random.default_rng(0).normal(size=(7, 10))
    assert dh.l2_distance(phi, phi, 0.1) == 0.0
    assert dh.l2_distance(phi + 0.3, phi, 0.1) == pytest.approx(0.3 * math.sqrt(1.0))
    with pytest.raises(ShapeMismatch):
        dh.l2_distance(phi, phi[:, :5], 0.1)


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        dh.TrainConfig(scheme="midpoint")
    with pytest.raises(ConfigInvalid):
        dh.TrainConfig(negative_path_policy="ignore")
    with pytest.raises(ConfigInvalid):
        dh.TrainConfig(lr=0.0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "bs.ckpt"
    rep = dh.train(mk.bs_model(), CLAIM, dh.TrainConfig(**TINY), checkpoint_path=path)
    return rep, path


def test_train_report_contract(tiny_run):
    rep, path = tiny_run
    assert len(rep.loss_curve) == len(rep.x0_curve) == len(rep.epochs) <= TINY["epochs"]
    assert rep.best_loss == min(rep.loss_curve) <= rep.loss_curve[0]
    assert rep.loss_curve[rep.epochs.index(rep.best_epoch)] == rep.best_loss
    net, meta = nn.load_checkpoint(path)
    assert meta["best_epoch"] == str(rep.best_epoch)
    for k, v in net.params().items():
        np.testing.assert_array_equal(v, rep.best_net.params()[k])


def test_best_net_reproduces_best_loss(tiny_run):
    rep, _ = tiny_run
    cfg = dh.TrainConfig(**TINY)
    m = mk.bs_model()
    grid = cfg.grid(CLAIM)
    inc = mk.sample_increments(m, grid, cfg.batch, mk.derive_seed(cfg.seed, 1, rep.best_epoch))
    ev = dh.evaluate(rep.best_net, m, CLAIM, grid, increments=inc)
    assert ev.loss == pytest.approx(rep.best_loss, rel=1e-12)


def test_train_deterministic(tiny_run):
    rep, _ = tiny_run
    again = dh.train(mk.bs_model(), CLAIM, dh.TrainConfig(**TINY))
    assert again.loss_curve == rep.loss_curve and again.x0_curve == rep.x0_curve


def test_loss_curve_csv(tiny_run, tmp_path):
    rep, _ = tiny_run
    rep.write_loss_curve(tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "loss", "x0"]
    assert [float(r[1]) for r in rows[1:]] == rep.loss_curve


def test_evaluate_deterministic_and_x0_seed_free(tiny_run):
    rep, _ = tiny_run
    m = mk.bs_model()
    g = mk.GridSpec(1.0, 5)
    a = dh.evaluate(rep.best_net, m, CLAIM, g, 500, seed=1)
    b = dh.evaluate(rep.best_net, m, CLAIM, g, 500, seed=1)
    c = dh.evaluate(rep.best_net, m, CLAIM, g, 500, seed=2)
    np.testing.assert_array_equal(a.wealth, b.wealth)
    assert a.loss == b.loss and a.x0 == c.x0
    assert a.loss != c.loss


def test_zero_portfolio_net():
    net = nn.init_params(4, 0)
    net.out_head.A[:] = 0.0
    net.out_head.b[:] = 0.0
    m = mk.merton_model()
    ev = dh.evaluate(net, m, CLAIM, mk.GridSpec(1.0, 8), 2000, seed=5)
    F = CLAIM.payoff(ev.stock[:, -1])
    assert np.all(ev.pi == 0.0)
    assert ev.loss == pytest.approx(0.5 * np.mean((ev.x0 - F) ** 2), rel=1e-12)


def _rough_model():
    # coarse steps and huge volatility make Euler stock steps go negative
    return mk.MarketModel(0.0, (2.0,), 1, (), (), name="rough")


def test_discard_batch_accounting():
    cfg = dh.TrainConfig(**{**TINY, "R": 2, "epochs": 10})
    rep = dh.train(_rough_model(), CLAIM, cfg)
    assert rep.discarded_batches > 0
    assert len(rep.loss_curve) + rep.discarded_batches == cfg.epochs


def test_log_scheme_policy_reruns():
    cfg = dh.TrainConfig(**{**TINY, "R": 2, "epochs": 10, "negative_path_policy": "log-scheme"})
    rep = dh.train(_rough_model(), CLAIM, cfg)
    assert rep.rerun_log_scheme > 0
    assert len(rep.loss_curve) + rep.discarded_batches == cfg.epochs


def test_log_scheme_never_discards():
    cfg = dh.TrainConfig(**{**TINY, "scheme": "log"})
    rep = dh.train(mk.kou_model(), CLAIM, cfg)
    assert rep.discarded_batches == 0 and len(rep.loss_curve) == cfg.epochs


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises_with_report(tmp_path):
    net = nn.init_params(4, 0)
    net.price_head.b[:] = 1e300
    with pytest.raises(NonFiniteLoss) as err:
        dh.train(mk.bs_model(), CLAIM, dh.TrainConfig(**TINY), net=net, checkpoint_path=tmp_path / "x.ckpt")
    assert err.value.report.loss_curve == []


def test_probe_curve_recorded():
    cfg = dh.TrainConfig(**{**TINY, "probe_every": 5, "probe_size": 50})
    rep = dh.train(mk.bs_model(), CLAIM, cfg)
    assert [e for e, _ in rep.probe_curve] == [0, 5, 10]
    assert all(v > 0 for _, v in rep.probe_curve)


def test_bs_reference_portfolio_shape():
    m = mk.bs_model()
    g = mk.GridSpec(1.0, 6)
    inc = mk.sample_increments(m, g, 10, 0)
    S = mk.simulate_stock(m, g, inc)
    W = np.full_like(S, 0.5)
    phi = dh.bs_reference_portfolio(S, W, g, m, CLAIM)
    assert phi.shape == (10, 6)
    assert phi[0, 0] == pytest.approx(pr.bs_delta_portfolio(0.0, 1.0, 0.5, 0.2, 0.5, 1.0))


def test_compare_residuals_common_paths(tiny_run, tmp_path):
    rep, _ = tiny_run
    m = mk.merton_model()
    r = dh.compare_residuals(m, CLAIM, mk.GridSpec(1.0, 5), 300, rep.best_net, seed=3, feedback=True)
    assert set(r.residuals) == {"learned", "merton_delta", "feedback"}
    assert r.x0["merton_delta"] == pytest.approx(0.5152111, abs=1e-7)
    for name, res in r.residuals.items():
        assert res.shape == (300,)
        assert set(r.stats[name]) == {"mean", "std", "skewness", "q01", "q99"}
    r.write_csv(tmp_path / "res.csv")
    rows = list(csv.reader(open(tmp_path / "res.csv")))
    assert rows[0] == ["strategy", "path", "residual"] and len(rows) == 901


def test_merton_delta_residuals_negatively_skewed():
    net = nn.init_params(4, 0)
    r = dh.compare_residuals(mk.merton_model(), CLAIM, mk.GridSpec(1.0, 50), 4000, net, seed=1)
    assert r.stats["merton_delta"]["skewness"] < -1


def test_zero_jump_market_residuals_small():
    net = nn.init_params(4, 0)
    r = dh.compare_residuals(mk.merton_model(lam=0.0), CLAIM, mk.GridSpec(1.0, 40), 2000, net, seed=2)
    assert np.max(np.abs(r.residuals["merton_delta"])) < 0.1


def test_sweep_rows_and_failures(tmp_path):
    cfg = dh.TrainConfig(**{**TINY, "epochs": 3})
    rows = dh.sweep(mk.bs_model(), 0.5, [(0.5, 4), (1.0, 4), (1.0, 0)], cfg)
    assert [(r.T, r.R) for r in rows] == [(0.5, 4), (1.0, 4), (1.0, 0)]
    assert all(math.isfinite(r.loss) and math.isfinite(r.l2) for r in rows[:2])
    assert rows[2].error and math.isnan(rows[2].loss)
    assert rows[1].abs_price_err == pytest.approx(abs(rows[1].x0 - pr.bs_price(0, 1, 0.2, 0, 1, 0.5)))
    dh.write_sweep_csv(tmp_path / "s.csv", rows)
    lines = open(tmp_path / "s.csv").read().splitlines()
    assert lines[0] == "model,T,R,loss,abs_price_err,l2" and len(lines) == 4


def test_checkpoint_name():
    assert dh.checkpoint_name("merton", 1.0, 150, 7) == "merton_1_150_7.ckpt"
