"""Static Bertrand-Nash pricing with per-customer spillover bonuses.

Each firm maximizes N * s_i(p) * (p_i - c + mu_i), where mu_i is the CLP
margin earned outside the category per customer attracted.  The first-order
condition gives the markup map

    p_i = c - mu_i + s_i / (-ds_i/dp_i),

iterated with damping; convergence is certified on the normalized FOC
residual s_i + (p_i - c + mu_i) * ds_i/dp_i (share units, i.e. dPi/dp / N).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import UTILITY_PRICE_SCALE
from .demand import _lambda_own, compute_shares

TIER_LABELS = ("Tier0", "Tier1", "Tier2")


class NashConvergenceError(RuntimeError):
    """Raised when a pricing fixed point cannot be certified."""


@dataclass
class SpilloverParams:
    """Per-firm spillover bonus in CLP per customer, one row per tier."""

    mu: np.ndarray               # shape (n_tiers, n_firms)
    mode: str = "heterogeneous"  # or "homogeneous"
    firms: tuple = ("CV", "FA", "SB")

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")
        if self.mode == "homogeneous" and np.any(np.ptp(self.mu, axis=1) != 0):
            raise ValueError("homogeneous mode requires one value per tier")
        if np.any(self.mu < 0):
            warnings.warn("negative spillover bonus fitted; interpret with care",
                          stacklevel=2)

    def for_tier(self, tier):
        return self.mu[tier]


@dataclass
class NashSolution:
    prices: np.ndarray
    shares: np.ndarray
    foc_residuals: np.ndarray
    iterations: int
    converged: bool
    multiplicity_spread: float = 0.0


def _per_firm(cost, prices):
    """Costs may be one per game or one per (game, firm)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim == np.ndim(prices):
        return cost
    return cost[..., None]


def profit(prices, market_size, cost, intercepts, alpha, sigma, mu):
    """Per-firm weekly profit N * s * (p - c + mu) at a price vector.

    Vectorized over leading axes of ``prices``/``intercepts``; ``cost`` may
    be per game or per (game, firm).
    """
    prices = np.asarray(prices, dtype=float)
    a = np.asarray(alpha, dtype=float)[..., None]
    delta = np.asarray(intercepts, dtype=float) - a * prices / UTILITY_PRICE_SCALE
    res = compute_shares(delta, sigma)
    margin = prices - _per_firm(cost, prices) + mu
    return np.asarray(market_size)[..., None] * res.shares * margin


def firm_profit(prices, firm_index, market_size, cost, intercepts, alpha, sigma, mu):
    """Profit of one firm; convenience wrapper over :func:`profit`."""
    return profit(prices, market_size, cost, intercepts, alpha, sigma, mu)[..., firm_index]


def foc_residuals(prices, cost, intercepts, alpha, sigma, mu):
    """s_i + (p_i - c + mu_i) * ds_i/dp_i, in share units."""
    a_util = np.asarray(alpha, dtype=float)[..., None]
    prices = np.asarray(prices, dtype=float)
    delta = np.asarray(intercepts, dtype=float) - a_util * prices / UTILITY_PRICE_SCALE
    res = compute_shares(delta, sigma)
    group = (1.0 - res.outside)[..., None]
    a = a_util / UTILITY_PRICE_SCALE
    lam = np.maximum(_lambda_own(res.conditional, group, sigma), 1e-12)
    dsdp = -a * res.shares * lam
    margin = prices - _per_firm(cost, prices) + mu
    return res.shares + margin * dsdp, res, (dsdp, a * lam)


def solve_nash(market_size, cost, intercepts, alpha, sigma, mu,
               start_prices=None, damping=0.5, max_iter=10_000, foc_tol=1e-8,
               probe_starts=0, seed=0):
    """Simultaneous Bertrand-Nash prices via the damped markup map.

    All market-level arguments broadcast over leading axes, so a whole panel
    of independent (drug, week) games solves in one call.  Falls back to
    best-response iteration with bracketed scalar solves when the fixed point
    stalls.  ``probe_starts`` > 0 re-solves from random starts and records the
    max price spread across converged starts (multiplicity probe).
    """
    intercepts = np.asarray(intercepts, dtype=float)
    cost_arr = np.asarray(cost, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), intercepts.shape)
    if start_prices is None:
        start_prices = np.broadcast_to((cost_arr * 1.1)[..., None], intercepts.shape)
    p = np.array(np.broadcast_to(np.asarray(start_prices, dtype=float),
                                 intercepts.shape), dtype=float)
    if np.any(p <= 0):
        raise ValueError("start prices must be positive")

    sol = _iterate_markup(p, market_size, cost_arr, intercepts, alpha, sigma, mu,
                          damping, max_iter, foc_tol)
    if not sol.converged:
        sol = _best_response_fallback(sol, market_size, cost_arr, intercepts,
                                      alpha, sigma, mu, foc_tol)
    if probe_starts > 0 and sol.converged:
        rng = np.random.default_rng(seed)
        spread = 0.0
        for _ in range(probe_starts):
            p0 = sol.prices * rng.uniform(0.6, 1.5, size=sol.prices.shape)
            alt = _iterate_markup(np.maximum(p0, 1e-6), market_size, cost_arr,
                                  intercepts, alpha, sigma, mu, damping,
                                  max_iter, foc_tol)
            if alt.converged:
                rel = np.max(np.abs(alt.prices - sol.prices) / np.abs(sol.prices))
                spread = max(spread, float(rel))
        sol.multiplicity_spread = spread
    return sol


def _iterate_markup(p, market_size, cost, intercepts, alpha, sigma, mu,
                    damping, max_iter, foc_tol):
    """Damped markup-map iteration with per-game adaptive damping.

    The map 2-cycles for stiff games (sigma near 0.9 with a dominant firm),
    so any game whose residual stops improving gets its damping halved.
    """
    game_shape = p.shape[:-1]
    damp = np.full(game_shape + (1,), float(damping))
    best = np.full(game_shape, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        resid, res, (dsdp, a_lam) = foc_residuals(p, cost, intercepts, alpha,
                                                  sigma, mu)
        game_resid = np.max(np.abs(resid), axis=-1)
        if np.max(game_resid) < foc_tol:
            return NashSolution(p, res.shares, resid, it, True)
        if it % 100 == 0:
            stalled = game_resid > 0.5 * best
            damp[..., 0] = np.where(stalled & (game_resid >= foc_tol),
                                    np.maximum(damp[..., 0] * 0.5, 0.02),
                                    damp[..., 0])
            best = np.minimum(best, game_resid)
        # markup identity s / (-ds/dp) = 1 / (a * lambda): stays finite even
        # where a rival's share underflows to zero
        target = _per_firm(cost, p) - mu + 1.0 / a_lam
        p = np.maximum((1.0 - damp) * p + damp * target, 1.0)
    resid, res, _ = foc_residuals(p, cost, intercepts, alpha, sigma, mu)
    return NashSolution(p, res.shares, resid, it, bool(np.max(np.abs(resid)) < foc_tol))


def _best_response_fallback(sol, market_size, cost, intercepts, alpha, sigma, mu,
                            foc_tol, sweeps=300):
    """Per-game best-response cycling with bracketed scalar FOC solves."""
    from scipy.optimize import brentq

    squeeze = np.ndim(intercepts) == 1
    base = np.atleast_2d(np.asarray(intercepts, dtype=float))
    p = np.atleast_2d(sol.prices).copy()
    resid = np.atleast_2d(sol.foc_residuals).copy()
    shares = np.atleast_2d(sol.shares).copy()
    n_games, n_firms = base.shape
    cost_arr = np.asarray(cost, dtype=float)
    if cost_arr.ndim == np.ndim(intercepts):
        cost2 = np.broadcast_to(cost_arr, base.shape)
    else:
        cost2 = np.broadcast_to(np.atleast_1d(cost_arr)[..., None], base.shape)
    alpha2 = np.broadcast_to(np.asarray(alpha, dtype=float), (n_games,))
    mu2 = np.broadcast_to(mu, base.shape)

    for g in range(n_games):
        if np.max(np.abs(resid[g])) < foc_tol:
            continue
        pg = p[g].copy()

        def resid_one(price, i):
            trial = pg.copy()
            trial[i] = price
            r, _, _ = foc_residuals(trial, cost2[g], base[g], alpha2[g], sigma, mu2[g])
            return r[i]

        hi = cost2[g].max() + UTILITY_PRICE_SCALE * 100.0 / alpha2[g]
        ok = False
        for _ in range(sweeps):
            for i in range(n_firms):
                try:
                    pg[i] = brentq(resid_one, 1.0, hi, args=(i,), xtol=1e-11)
                except ValueError:
                    pass  # bracket failure: keep price, residual check decides
            rg, resg, _ = foc_residuals(pg, cost2[g], base[g], alpha2[g], sigma, mu2[g])
            if np.max(np.abs(rg)) < foc_tol:
                ok = True
                break
        p[g], resid[g], shares[g] = pg, rg, resg.shares
        if not ok:
            break
    converged = bool(np.max(np.abs(resid)) < foc_tol)
    if squeeze:
        p, resid, shares = p[0], resid[0], shares[0]
    return NashSolution(p, shares, resid, sol.iterations + sweeps, converged)


def recover_costs(prices, intercepts, alpha, sigma, mu):
    """Invert the pricing FOC for marginal cost: c = p + mu - s/(-ds/dp)."""
    prices = np.asarray(prices, dtype=float)
    a_util = np.asarray(alpha, dtype=float)[..., None]
    delta = np.asarray(intercepts, dtype=float) - a_util * prices / UTILITY_PRICE_SCALE
    res = compute_shares(delta, sigma)
    group = (1.0 - res.outside)[..., None]
    a = a_util / UTILITY_PRICE_SCALE
    lam = _lambda_own(res.conditional, group, sigma)
    dsdp_over_s = -a * lam
    if np.any(np.abs(dsdp_over_s) < 1e-300):
        raise ValueError("demand locally flat; cannot invert pricing condition")
    return prices + mu - 1.0 / (a * lam)


def estimate_spillovers(observed_prices, market_sizes, costs, intercepts, alpha,
                        sigma, mode="homogeneous", n_firms=3, bracket=(-5e3, 6e4),
                        starts=3, seed=0, pool="pooled"):
    """Fit spillover bonuses by matching Nash prices to observed prices.

    Minimizes sum over markets and firms of (p_nash(mu) - p_obs)^2 with a
    derivative-free search: golden-section for the homogeneous scalar,
    Nelder-Mead with multi-start for the heterogeneous vector.  ``pool``
    selects the pooled objective (default) or per-market fits averaged.
    """
    observed = np.asarray(observed_prices, dtype=float)

    def nash_prices(mu_vec):
        sol = solve_nash(market_sizes, costs, intercepts, alpha, sigma, mu_vec,
                         start_prices=np.maximum(observed, 1.0))
        if not sol.converged:
            return None
        return sol.prices

    def objective(mu_vec):
        p = nash_prices(np.broadcast_to(mu_vec, observed.shape))
        if p is None or not np.all(np.isfinite(p)):
            return 1e30  # penalized candidate, search continues
        return float(np.sum((p - observed) ** 2))

    if pool == "per_market_mean":
        return _per_market_spillovers(observed, market_sizes, costs, intercepts,
                                      alpha, sigma, mode, bracket, starts, seed)

    if mode == "homogeneous":
        mu_hat = _golden_section(lambda m: objective(np.full(n_firms, m)),
                                 bracket[0], bracket[1])
        mu_row = np.full(n_firms, mu_hat)
    elif mode == "heterogeneous":
        from scipy.optimize import minimize

        rng = np.random.default_rng(seed)
        best = None
        hom = _golden_section(lambda m: objective(np.full(n_firms, m)),
                              bracket[0], bracket[1])
        start_points = [np.full(n_firms, hom)]
        start_points += [rng.uniform(bracket[0], bracket[1] / 2, n_firms)
                         for _ in range(max(starts - 1, 0))]
        for x0 in start_points:
            r = minimize(objective, x0, method="Nelder-Mead",
                         options={"xatol": 1.0, "fatol": 1e-6, "maxiter": 4000})
            if best is None or r.fun < best.fun:
                best = r
        mu_row = best.x
    else:
        raise ValueError(f"mode must be 'homogeneous' or 'heterogeneous', got {mode!r}")
    return mu_row


def _per_market_spillovers(observed, market_sizes, costs, intercepts, alpha,
                           sigma, mode, bracket, starts, seed):
    fits = []
    for j in range(observed.shape[0]):
        fits.append(
            estimate_spillovers(observed[j:j + 1], np.atleast_1d(market_sizes)[j:j + 1],
                                np.atleast_1d(costs)[j:j + 1], intercepts[j:j + 1],
                                alpha if np.ndim(alpha) == 0 else np.atleast_1d(alpha)[j:j + 1],
                                sigma, mode=mode, bracket=bracket, starts=starts,
                                seed=seed)
        )
    return np.mean(np.stack(fits), axis=0)


def _golden_section(f, lo, hi, tol=1e-3, max_iter=200):
    g = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (a + b) / 2.0
