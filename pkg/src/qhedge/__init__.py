"""Minimal-variance pricing and hedging of European calls in jump-diffusion
markets, with a from-scratch LSTM hedging network."""

from .market import GridSpec, MarketModel, bs_model, bsmb_model, kou_model, merton_model
from .pricing import CallClaim, PriceResult, compute_G, mc_minimal_variance_price, merton_series_price

__all__ = [
    "CallClaim", "GridSpec", "MarketModel", "PriceResult", "bs_model", "bsmb_model", "compute_G",
    "kou_model", "mc_minimal_variance_price", "merton_model", "merton_series_price",
]
