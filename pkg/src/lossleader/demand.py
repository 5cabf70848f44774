"""Nested logit demand: shares, inversion, trimming, and elasticities.

All inside goods in a market share one nest; the outside good has utility
normalized to zero, which is the "+1" in the group logit denominator.  With
d_i = delta_i / (1 - sigma) and D = sum_k exp(d_k):

    conditional share  s_i|g = exp(d_i) / D
    inclusive value    IV    = (1 - sigma) * ln D
    group share        s_g   = exp(IV) / (1 + exp(IV))
    overall share      s_i   = s_i|g * s_g
    outside share      s_0   = 1 - s_g

Every exponential goes through max-subtraction; sigma = 0.9 scales utilities
by 10 so the stabilization is not optional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import UTILITY_PRICE_SCALE


@dataclass
class DemandParams:
    """Estimated demand primitives with estimation bounds.

    ``alpha_pre`` and ``alpha_post`` are utility per 1,000 CLP and may be
    scalars or per-product arrays.
    """

    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_pre: float = 0.1158
    alpha_post: float = 0.0825
    sigma: float = 0.9
    alpha_min: float = 0.01
    sigma_bound: float = 0.9

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not (0.0 < self.sigma <= self.sigma_bound < 1.0):
            raise ValueError(f"sigma={self.sigma} outside (0, {self.sigma_bound}]")
        if np.any(np.asarray(self.alpha_pre) < self.alpha_min) or np.any(
            np.asarray(self.alpha_post) < self.alpha_min
        ):
            raise ValueError("price coefficients below alpha_min")

    def alpha_for(self, period):
        if period == "pre":
            return self.alpha_pre
        if period == "post":
            return self.alpha_post
        raise ValueError(f"period must be 'pre' or 'post', got {period!r}")


@dataclass
class ShareResult:
    """Shares and inclusive value for one or many markets (last axis = firms)."""

    shares: np.ndarray        # overall s_i
    conditional: np.ndarray   # s_i|g
    inclusive_value: np.ndarray
    outside: np.ndarray       # s_0

    def validate(self, atol=1e-9):
        total = self.shares.sum(axis=-1) + self.outside
        if not np.allclose(total, 1.0, atol=atol):
            raise ValueError("shares plus outside do not sum to one")


def compute_shares(delta, sigma):
    """Nested logit choice probabilities for mean utilities ``delta``.

    Parameters
    ----------
    delta : array, shape (..., F)
        Mean utilities of inside goods; last axis indexes firms.
    sigma : float in (0, 1)
        Nesting parameter.

    Returns
    -------
    ShareResult with arrays broadcast over the leading axes.
    """
    if not (0.0 < sigma < 1.0):
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta contains non-finite values")
    d = delta / (1.0 - sigma)
    dmax = d.max(axis=-1, keepdims=True)
    ed = np.exp(d - dmax)
    denom = ed.sum(axis=-1, keepdims=True)
    conditional = ed / denom
    log_d = dmax[..., 0] + np.log(denom[..., 0])  # ln D, stabilized
    iv = (1.0 - sigma) * log_d
    # s_g = exp(IV) / (1 + exp(IV)) via the stable logistic
    group = np.where(iv >= 0, 1.0 / (1.0 + np.exp(-iv)), np.exp(iv) / (1.0 + np.exp(iv)))
    shares = conditional * group[..., None]
    outside = 1.0 - group
    return ShareResult(shares=shares, conditional=conditional,
                       inclusive_value=np.asarray(iv), outside=np.asarray(outside))


def invert_shares(shares, conditional, outside, sigma):
    """Analytic inversion: delta_i = ln s_i - ln s_0 - sigma * ln s_i|g."""
    shares = np.asarray(shares, dtype=float)
    conditional = np.asarray(conditional, dtype=float)
    outside = np.asarray(outside, dtype=float)
    if np.any(shares <= 0) or np.any(conditional <= 0) or np.any(outside <= 0):
        raise ValueError("shares must be interior; zero shares are excluded upstream")
    return np.log(shares) - np.log(outside)[..., None] - sigma * np.log(conditional)


def delta_from_prices(intercepts, alpha, prices):
    """Mean utility at CLP prices: intercept - alpha * p / 1000."""
    return np.asarray(intercepts, dtype=float) - np.asarray(alpha, dtype=float) * (
        np.asarray(prices, dtype=float) / UTILITY_PRICE_SCALE
    )


def trim_utilities(delta_series, quantiles=(0.2, 0.8), min_obs=5):
    """Winsorize a per-product mean-utility series at the given quantiles.

    Series shorter than ``min_obs`` pass through unchanged with a warning
    flag.  Quantiles use linear interpolation between order statistics.
    """
    x = np.asarray(delta_series, dtype=float)
    if x.size < min_obs:
        return x.copy(), True
    lo, hi = np.quantile(x, quantiles, method="linear")
    return np.clip(x, lo, hi), False


def _lambda_own(conditional, group, sigma):
    # Own semi-elasticity factor: -ds_i/d(delta_i) / s_i
    return (1.0 - conditional) / (1.0 - sigma) + conditional * (1.0 - group)


def share_price_derivatives(alpha, sigma, prices, result):
    """Exact derivatives ds_i/dp_k of the share function, per CLP.

    Returns an array with shape (..., F, F); entry [i, k] is ds_i/dp_k.
    """
    s = result.shares
    cond = result.conditional
    group = (1.0 - result.outside)[..., None]
    a = np.asarray(alpha, dtype=float)[..., None] / UTILITY_PRICE_SCALE
    own = -a * s * _lambda_own(cond, group, sigma)
    # cross: ds_i/dp_k = alpha * s_i * s_k|g * [1/(1-sigma) - (1 - s_g)]
    factor = 1.0 / (1.0 - sigma) - (1.0 - group)
    cross = a[..., None] * s[..., :, None] * cond[..., None, :] * factor[..., None]
    out = cross
    idx = np.arange(s.shape[-1])
    out[..., idx, idx] = own
    return out


def own_elasticity(alpha, sigma, prices, result):
    """Own-price elasticity (ds_i/dp_i) * (p_i / s_i), negative for interior shares."""
    prices = np.asarray(prices, dtype=float)
    cond = result.conditional
    group = (1.0 - result.outside)[..., None]
    a = np.asarray(alpha, dtype=float)[..., None]
    return -a * (prices / UTILITY_PRICE_SCALE) * _lambda_own(cond, group, sigma)


def cross_elasticity(alpha, sigma, prices, result, firm_i, firm_k):
    """Cross-price elasticity of firm i's share to firm k's price, i != k."""
    if firm_i == firm_k:
        raise ValueError("cross elasticity requires two distinct firms")
    prices = np.asarray(prices, dtype=float)
    group = 1.0 - result.outside
    a = np.asarray(alpha, dtype=float)
    factor = 1.0 / (1.0 - sigma) - (1.0 - group)
    return (
        a * (prices[..., firm_k] / UTILITY_PRICE_SCALE)
        * result.conditional[..., firm_k] * factor
    )


def cross_elasticity_matrix(alpha, sigma, prices, result):
    """All pairwise cross elasticities; diagonal holds own elasticities."""
    deriv = share_price_derivatives(alpha, sigma, prices, result)
    p = np.asarray(prices, dtype=float)
    return deriv * p[..., None, :] / result.shares[..., :, None]


def reported_closed_form_elasticities(alpha, sigma, prices, result):
    """Closed-form summary elasticities used in published tables.

    own:   alpha * p * (1 - s) - sigma * s_cond * (1 - s_cond)
    cross: alpha * p * s_cond * (1 - 1/sigma)

    These are reporting conventions, not derivatives of the share function;
    output is tagged so downstream tables can flag it.
    """
    p = np.asarray(prices, dtype=float) / UTILITY_PRICE_SCALE
    a = np.asarray(alpha, dtype=float)
    s = result.shares
    cond = result.conditional
    own = a * p * (1.0 - s) - sigma * cond * (1.0 - cond)
    cross = a * p * cond * (1.0 - 1.0 / sigma)
    return {"own": own, "cross": cross, "convention": "closed_form_table"}
