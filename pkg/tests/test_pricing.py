import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from qhedge import market as mk
from qhedge import pricing as pr
from qhedge.errors import DivisionByZeroWealth, TruncationNotConverged, UnsupportedModel

CLAIM = pr.CallClaim(0.5, 1.0)


def test_bs_price_reference():
    assert pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5) == pytest.approx(0.5000094, abs=1e-7)


def test_bs_price_limits():
    assert pr.bs_price(0.0, 1.3, 0.2, 0.0, 1.0, 0.0) == 1.3
    assert pr.bs_price(0.0, 1.3, 0.0, 0.0, 1.0, 0.5) == pytest.approx(0.8)
    assert pr.bs_price(1.0, 0.4, 0.2, 0.0, 1.0, 0.5) == 0.0


def test_bs_delta_portfolio_by_hand():
    phi = pr.bs_delta_portfolio(0.0, 1.0, 0.5, 0.2, 0.5, 1.0)
    assert phi == pytest.approx(2 * stats.norm.cdf(3.56574), abs=1e-5)
    assert phi == pytest.approx(1.99964, abs=1e-5)


@given(st.floats(0.1, 5), st.floats(0.01, 0.99))
def test_bs_delta_portfolio_bounded_when_s_equals_x(s, t):
    assert pr.bs_delta_portfolio(t, s, s, 0.2, 0.5, 1.0) <= 1.0


def test_bs_delta_portfolio_deep_itm():
    assert pr.bs_delta_portfolio(0.5, 50.0, 10.0, 0.2, 0.5, 1.0) == pytest.approx(5.0)


def test_bs_delta_portfolio_zero_wealth():
    with pytest.raises(DivisionByZeroWealth):
        pr.bs_delta_portfolio(0.0, 1.0, 0.0, 0.2, 0.5, 1.0)


def test_G_values():
    assert pr.compute_G(mk.merton_model()) == pytest.approx(-0.948532, abs=1e-6)
    assert pr.compute_G(mk.bsmb_model()) == pytest.approx(-0.3 / 0.0402, rel=1e-12)
    assert pr.compute_G(mk.merton_model(alpha0=0.0)) == 0.0


def test_merton_series_reference():
    assert pr.merton_price_model(mk.merton_model(), CLAIM).price == pytest.approx(0.5152111, abs=1e-7)


def test_merton_series_without_jumps_is_bs():
    p = pr.merton_series_price(1.0, 0.5, 0.2, 0.0, -0.2, 0.05, 1.0).price
    assert p == pytest.approx(pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5), abs=1e-15)


def test_merton_series_truncation_guard():
    with pytest.raises(TruncationNotConverged):
        pr.merton_series_price(1.0, 0.5, 0.2, 5.0, -0.2, 0.05, 1.0, J_max=5)


@given(st.floats(0.5, 10), st.floats(-0.5, 0.5).filter(lambda m: abs(m) > 1e-3), st.floats(0.01, 0.2))
def test_merton_price_at_least_bs(lam, mu, delta):
    p = pr.merton_series_price(1.0, 0.5, 0.2, lam, mu, delta, 1.0).price
    assert p >= pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5) - 1e-12


def test_qstar_series_reference():
    # frozen from the closed form; the Monte-Carlo check below is independent
    assert pr.qstar_series_price(mk.merton_model(), CLAIM).price == pytest.approx(0.5193229, abs=1e-7)


def test_qstar_series_matches_monte_carlo():
    mc = pr.mc_minimal_variance_price(mk.merton_model(), CLAIM, 400_000, 21)
    assert abs(mc.price - 0.5193229) < 3 * mc.stderr


def test_qstar_series_without_jumps_is_bs():
    v = pr.qstar_series_price(mk.bs_model(), CLAIM).price
    assert v == pytest.approx(pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5), abs=1e-14)


def test_zstar_without_jumps_is_exponential_martingale():
    m = mk.bsmb_model()
    g = mk.GridSpec(1.0, 20)
    inc = mk.sample_increments(m, g, 50, 3)
    Z, signed = pr.simulate_Zstar(m, g, inc)
    G = pr.compute_G(m)
    W = np.cumsum(math.sqrt(g.dt) * np.einsum("jbi,b->ji", inc.B, np.asarray(m.sigma0)), axis=1)
    expected = np.exp(-0.5 * G * G * m.sigma_sq * g.times()[1:] + G * W)
    np.testing.assert_allclose(Z[:, 1:], expected, rtol=1e-12)
    assert not signed and np.all(Z[:, 0] == 1.0)


@pytest.mark.parametrize("model", [mk.bs_model(), mk.bsmb_model(), mk.merton_model()], ids=lambda m: m.name)
def test_grid_densities_have_unit_mean(model):
    g = mk.GridSpec(1.0, 50)
    inc = mk.sample_increments(model, g, 40_000, 6)
    Zs, _ = pr.simulate_Zstar(model, g, inc)
    Zm = pr.simulate_ZM(model, g, inc)
    for Z in (Zs[:, -1], Zm[:, -1]):
        assert abs(Z.mean() - 1.0) < 3 * Z.std() / math.sqrt(Z.size)


def test_ZM_without_drift_is_one():
    m = mk.merton_model(alpha0=0.0)
    g = mk.GridSpec(1.0, 10)
    assert np.all(pr.simulate_ZM(m, g, mk.sample_increments(m, g, 20, 0)) == 1.0)


def test_signed_flag_records_negative_factor():
    m = mk.merton_model(alpha0=5.0)  # |G| large enough for 1 + G(y - 1) <= 0 after big up-jumps
    m = mk.MarketModel(5.0, (0.2,), 1, (5.0,), (mk.LogNormal(0.5, 0.3),), name="wild")
    g = mk.GridSpec(1.0, 10)
    _, signed = pr.simulate_Zstar(m, g, mk.sample_increments(m, g, 2000, 1))
    assert signed


def test_mc_price_without_jumps_is_bs():
    r = pr.mc_minimal_variance_price(mk.merton_model(lam=0.0), CLAIM, 100_000, 4)
    assert abs(r.price - pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5)) < 3 * r.stderr


def test_mc_price_deterministic_and_json_order():
    a = pr.mc_minimal_variance_price(mk.merton_model(), CLAIM, 5000, 1)
    b = pr.mc_minimal_variance_price(mk.merton_model(), CLAIM, 5000, 1)
    assert a.to_json() == b.to_json()
    assert list(json.loads(a.to_json())) == ["method", "price", "stderr", "n_paths", "seed",
                                             "signed_measure_used", "params"]


def test_mc_price_grid_schemes_close_to_exact():
    exact = pr.mc_minimal_variance_price(mk.merton_model(), CLAIM, 20_000, 2)
    grid = pr.mc_minimal_variance_price(mk.merton_model(), CLAIM, 20_000, 2, mk.GridSpec(1.0, 50), "log")
    assert abs(exact.price - grid.price) < 4 * math.hypot(exact.stderr, grid.stderr)


def test_kou_refused():
    with pytest.raises(UnsupportedModel, match="G"):
        pr.mc_minimal_variance_price(mk.kou_model(), CLAIM, 10_000, 0)


@given(st.integers(2, 4), st.integers(0, 2**31))
def test_mixing_matches_independent_sum(n, seed):
    rng = np.random.default_rng(seed)
    lams = rng.uniform(0.5, 5.0, n)
    specs = [mk.LogNormal(float(m), float(d)) for m, d in zip(rng.uniform(-0.2, 0.2, n), rng.uniform(0.01, 0.1, n))]
    multi = mk.MarketModel(0.1, (0.2,), 1, tuple(lams), tuple(specs))
    lam, mix = mk.mix_compound_poisson(lams, specs)
    mixed = mk.MarketModel(0.1, (0.2,), 1, (lam,), (mix,))
    a, _ = pr.exact_terminal_samples(multi, 1.0, 4000, seed)
    b, _ = pr.exact_terminal_samples(mixed, 1.0, 4000, seed + 1)
    assert stats.ks_2samp(a, b).pvalue > 1e-4


def _p_samples(model, tau, s, n, seed):
    shifted = mk.MarketModel(model.alpha0, model.sigma0, model.gamma0, model.lam, model.jumps, s)
    return pr.exact_terminal_samples(shifted, tau, n, seed)[0]


def test_beta_without_jumps_closed_form():
    m = mk.bs_model()
    t, s, tau = 0.3, 0.8, 0.7
    d1 = (math.log(s / 0.5) + (0.3 + 0.02) * tau) / (0.2 * math.sqrt(tau))
    assert pr.beta_series(t, s, m, CLAIM) == pytest.approx(0.2 * s * math.exp(0.3 * tau) * stats.norm.cdf(d1),
                                                           rel=1e-12)


def test_beta_small_strike_is_forward():
    m = mk.merton_model()
    v = pr.beta_series(0.2, 1.1, m, pr.CallClaim(1e-8, 1.0))
    assert v == pytest.approx(0.2 * 1.1 * math.exp(0.2 * 0.8), rel=1e-9)


@pytest.mark.parametrize("t,s", [(0.1, 0.9), (0.6, 1.2)])
def test_beta_kappa_monte_carlo(t, s):
    m = mk.merton_model()
    S = _p_samples(m, 1.0 - t, s, 200_000, 17)
    itm = (S >= 0.5) * S
    assert abs(pr.beta_series(t, s, m, CLAIM) - 0.2 * itm.mean()) < 3 * 0.2 * itm.std() / math.sqrt(S.size)
    y = 0.8
    ind = (y * S >= 0.5).astype(float) - (S >= 0.5)
    assert abs(pr.kappa_series(t, s, y, m, CLAIM) - ind.mean()) < 3 * max(ind.std(), 1e-12) / math.sqrt(S.size) + 1e-12


@given(st.floats(0.0, 0.99), st.floats(0.2, 3.0))
def test_kappa_zero_at_unit_jump(t, s):
    assert pr.kappa_series(t, s, 1.0, mk.merton_model(), CLAIM) == 0.0


@given(st.floats(0.0, 0.99), st.floats(0.2, 3.0), st.floats(1.0, 3.0))
def test_kappa_nonnegative_for_up_jumps(t, s, y):
    assert pr.kappa_series(t, s, y, mk.merton_model(), CLAIM) >= 0.0


def test_claim_kappa_zero_at_unit_jump():
    assert pr.kappa_claim_series(0.4, 1.0, 1.0, mk.merton_model(), CLAIM) == 0.0


def test_feedback_constant_claim():
    m = mk.merton_model()
    G = pr.compute_G(m)
    x, F = 0.4, 0.6
    pi = pr.feedback_portfolio(0.0, x, F, 0.0, None, m)
    assert pi * x == pytest.approx(G * (x - F), rel=1e-12)
    assert pi > 0
    assert pr.feedback_portfolio(0.0, F, F, 0.0, None, m) == 0.0


def test_feedback_zero_wealth():
    with pytest.raises(DivisionByZeroWealth):
        pr.feedback_portfolio(0.0, 0.0, 0.5, 0.1, None, mk.bs_model())


@given(st.floats(0.0, 0.95), st.floats(0.5, 2.0))
def test_feedback_with_qstar_inputs_is_bs_delta(t, s):
    m = mk.bs_model()
    F, beta, kappa = pr.claim_coefficients(t, s, m, CLAIM, "qstar")
    pi = pr.feedback_portfolio(t, F, F, beta, kappa, m)
    assert pi == pytest.approx(pr.bs_delta_portfolio(t, s, F, 0.2, 0.5, 1.0), rel=1e-9)


def test_feedback_tracks_bs_delta_along_paths():
    from qhedge.deephedge import bs_reference_portfolio, l2_distance, run_strategy

    m = mk.bs_model()
    g = mk.GridSpec(1.0, 40)
    inc = mk.sample_increments(m, g, 100, 8)
    S = mk.simulate_stock(m, g, inc)
    pis = []

    def fb(i, t, s, x):
        F_t, beta, kappa = pr.claim_coefficients(t, s, m, CLAIM, "qstar")
        pis.append(pr.feedback_portfolio(t, x, F_t, beta, kappa, m))
        return pis[-1]

    W = run_strategy(m, g, inc, S, pr.qstar_series_price(m, CLAIM).price, fb)
    phi = bs_reference_portfolio(S, W, g, m, CLAIM)
    pi = np.stack(pis, axis=1)
    assert l2_distance(pi, phi, g.dt) * 10 <= l2_distance(np.zeros_like(phi), phi, g.dt)


def test_crosscheck_without_drift_is_expected_payoff():
    m = mk.merton_model(alpha0=0.0, lam=0.0)
    r = pr.crosscheck_price(m, CLAIM, mk.GridSpec(1.0, 5), 20_000, seed=3)
    assert abs(r.price - pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5)) < 3 * r.stderr


def test_crosscheck_bs():
    r = pr.crosscheck_price(mk.bs_model(), CLAIM, mk.GridSpec(1.0, 20), 20_000, seed=4)
    assert abs(r.price - pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5)) < 3 * r.stderr


def test_merton_delta_without_jumps_is_bs_delta():
    m = mk.bs_model()
    s = np.array([0.6, 1.0, 1.7])
    np.testing.assert_allclose(pr.merton_delta(0.3, s, m, CLAIM), pr.bs_delta(0.3, s, 0.2, 0.0, 1.0, 0.5),
                               rtol=1e-12)


def test_merton_delta_matches_finite_difference():
    m = mk.merton_model()
    h = 1e-5

    def price(s):
        return pr.merton_series_price(s, 0.5, 0.2, 5.0, -0.2, 0.05, 0.7).price

    fd = (price(1.1 + h) - price(1.1 - h)) / (2 * h)
    assert pr.merton_delta(0.3, 1.1, m, CLAIM) == pytest.approx(fd, rel=1e-6)


def test_price_surface_rows():
    rows = pr.price_surface("lam", [1.0, 5.0], "mu", [-0.5, -0.1],
                            dict(alpha0=0.2, sigma0=0.2, lam=5.0, mu=-0.2, delta=0.05), mv_route="series")
    assert len(rows) == 4
    for lam, mu, pm, pv, diff in rows:
        assert diff == pytest.approx(pv - pm)
        assert pm >= pr.bs_price(0.0, 1.0, 0.2, 0.0, 1.0, 0.5) - 1e-12


@given(st.floats(-0.5, 0.5).filter(lambda m: abs(m) > 1e-3), st.floats(0.01, 0.2))
def test_merton_price_increasing_in_intensity(mu, delta):
    prices = [pr.merton_series_price(1.0, 0.5, 0.2, lam, mu, delta, 1.0).price for lam in (0.0, 1.0, 3.0, 6.0)]
    assert all(a <= b + 1e-12 for a, b in zip(prices, prices[1:]))


def test_zstar_jumps_upward_for_downward_stock_jumps():
    m = mk.merton_model()
    g = mk.GridSpec(1.0, 150)
    inc = mk.sample_increments(m, g, 200, 12)
    Z, _ = pr.simulate_Zstar(m, g, inc)
    ratio = Z[:, 1:] / Z[:, :-1]
    jumped = inc.counts.sum(axis=1) > 0
    assert np.all(ratio[jumped] > 1.0) and np.median(ratio[jumped]) > 1.1
    assert np.all(np.abs(ratio[~jumped] - 1) < 0.1)
    # the Merton density only sees the Brownian path
    W = np.cumsum(math.sqrt(g.dt) * inc.B[:, 0, :], axis=1)
    expected = np.exp(-0.5 * (0.2 / 0.2) ** 2 * g.times()[1:] - (0.2 / 0.2) * W)
    np.testing.assert_allclose(pr.simulate_ZM(m, g, inc)[:, 1:], expected, rtol=1e-10)
