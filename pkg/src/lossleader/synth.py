"""Ground-truth synthetic data generator.

Closes the simulation-estimation loop: every estimator in the package has a
generator here that plants a known truth and writes it to a sidecar.

Two pricing modes:

* ``ladder`` (default): each drug gets a three-tier price ladder shaped like
  the empirical markup pattern (mildly below cost at tier 0, strongly
  positive at tier 2).  The per-tier spillover bonus that rationalizes the
  ladder as a Bertrand-Nash outcome is backed out from the pricing FOC, and
  weekly prices re-solve Nash at those bonuses under AR(1) cost shocks and
  demand shocks, so prices are endogenous to xi.
* ``nash_mu``: tier prices solve Nash directly at externally given bonuses
  (used to plant exact spillover truths for recovery tests); costs sit well
  above the bonus so prices stay positive.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import DEFAULT_FIRMS, UTILITY_PRICE_SCALE, Market, Panel, build_panel
from .demand import DemandParams, _lambda_own, compute_shares
from .equilibrium import SpilloverParams, foc_residuals, solve_nash

REFILL_CHOICES = np.array([7, 14, 21, 28, 30, 45, 60, 90])
REFILL_WEIGHTS = np.array([0.023, 0.081, 0.023, 0.095, 0.113, 0.293, 0.270, 0.102])

#: Table-style spillover truth (CLP per customer), rows = tiers 0..2.
DEFAULT_MU_TIERS = np.array([
    [25756.4, 16074.7, 15660.1],
    [10609.7, 7895.6, 7713.2],
    [432.8, 3.5, -520.6],
])


@dataclass
class SynthConfig:
    """Calibration of the synthetic world; seed is mandatory."""

    seed: int
    n_markets: int = 222
    n_firms: int = 3
    n_weeks: int = 104
    period_break: int = 52
    firms: tuple = DEFAULT_FIRMS
    demand: DemandParams = field(default_factory=DemandParams)
    mu_tiers: np.ndarray = field(default_factory=lambda: DEFAULT_MU_TIERS.copy())
    price_mode: str = "ladder"          # or "nash_mu"
    # ladder-mode shape: tier-0 markup and multiplicative tier steps; when
    # ladder_z is set, each market's total climb targets a common demand
    # response z = alpha_j * (p2 - p0) instead of fixed steps, bounded to
    # keep individual increases in a published-looking range
    tier0_markup: float = -0.12
    tier_steps: tuple = (1.284, 1.239)
    ladder_z: float = 0.65
    climb_bounds: tuple = (0.50, 1.85)
    step_split: float = 0.55           # share of the log climb taken at step 1
    # cross-section draws
    cost_median: float = 11_000.0
    cost_spread: float = 0.45
    size_median: float = 2350.0
    size_spread: float = 0.6
    group_share_range: tuple = (0.35, 0.55)
    alpha_dispersion: float = 0.6      # lognormal sd of per-drug alpha scale
    alpha_clip: tuple = (0.3, 3.0)
    alpha_size_corr: float = -0.5      # big markets tend to be less price-sensitive
    firm_effects: tuple = (0.15, 0.0, -0.10)
    # shock scales
    xi_sd: float = 0.05
    cost_rho: float = 0.8
    cost_sd: float = 0.03
    wedge_sd: float = 0.02
    # staggered coordination schedule (larger markets move first, with the
    # size advantage decaying in log duration)
    adoption_rate: float = 0.35         # peak weekly adoption hazard
    size_effect: float = 2.5
    size_decay: float = 1.0
    tier_gap_weeks: int = 6

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory for synthetic generation")
        self.mu_tiers = np.asarray(self.mu_tiers, dtype=float)
        if not (0 < self.period_break < self.n_weeks):
            raise ValueError("period_break must lie strictly inside the panel")


def _draw_cross_section(cfg, rng):
    """Drug-level primitives: costs, sizes, characteristics, intercepts."""
    j = cfg.n_markets
    cost = cfg.cost_median * np.exp(rng.normal(0.0, cfg.cost_spread, j))
    z_size = rng.normal(0.0, 1.0, j)
    size = cfg.size_median * np.exp(cfg.size_spread * z_size)
    chronic = rng.random(j) < 0.883
    prescription = rng.random(j) < 0.653
    refill = rng.choice(REFILL_CHOICES, size=j, p=REFILL_WEIGHTS / REFILL_WEIGHTS.sum())
    molecule = np.array([f"M{k % 12:02d}" for k in rng.integers(0, 12, j)])
    sg0 = rng.uniform(*cfg.group_share_range, j)
    if cfg.alpha_dispersion > 0:
        rho = float(np.clip(cfg.alpha_size_corr, -1.0, 1.0))
        z_mix = rho * z_size + np.sqrt(1.0 - rho ** 2) * rng.normal(0.0, 1.0, j)
        ascale = np.exp(cfg.alpha_dispersion * z_mix
                        - cfg.alpha_dispersion ** 2 / 2.0)
        ascale = np.clip(ascale, cfg.alpha_clip[0], cfg.alpha_clip[1])
    else:
        ascale = np.ones(j)
    return dict(cost=cost, size=size, chronic=chronic, prescription=prescription,
                refill=refill, molecule=molecule, sg0=sg0, ascale=ascale)


def _intercepts_for_group_share(cfg, prices0, sg_target, alpha):
    """Drug intercept hitting a target tier-0 group share given firm effects."""
    e = np.asarray(cfg.firm_effects, dtype=float)
    sigma = cfg.demand.sigma
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim:
        alpha = alpha[:, None]
    base = e[None, :] - alpha * prices0 / UTILITY_PRICE_SCALE
    d = base / (1.0 - sigma)
    dmax = d.max(axis=1, keepdims=True)
    log_d = dmax[:, 0] + np.log(np.exp(d - dmax).sum(axis=1))
    iv_base = (1.0 - sigma) * log_d
    iv_target = np.log(sg_target / (1.0 - sg_target))
    b = iv_target - iv_base
    return b[:, None] + e[None, :]


def _implied_mu(prices, cost, intercepts, alpha, sigma):
    """Per-firm bonus making `prices` a Nash outcome at marginal cost `cost`."""
    a_util = np.asarray(alpha, dtype=float)[..., None]
    delta = np.asarray(intercepts, dtype=float) - a_util * prices / UTILITY_PRICE_SCALE
    res = compute_shares(delta, sigma)
    group = (1.0 - res.outside)[..., None]
    a = a_util / UTILITY_PRICE_SCALE
    margin = 1.0 / (a * _lambda_own(res.conditional, group, sigma))
    return margin - (prices - np.asarray(cost)[..., None])


def _tier_ladders(cfg, cross, rng):
    """Per-drug per-firm tier price ladders plus the implied/true bonuses."""
    j, f = cfg.n_markets, cfg.n_firms
    alpha_pre = cfg.demand.alpha_pre
    alpha_post = cfg.demand.alpha_post
    jitter = rng.uniform(0.99, 1.01, (j, f))
    a_pre_j = alpha_pre * cross["ascale"]
    a_post_j = alpha_post * cross["ascale"]
    if cfg.price_mode == "ladder":
        p0 = (1.0 + cfg.tier0_markup) * cross["cost"][:, None] * jitter
        if cfg.ladder_z is not None:
            p0_mean = p0.mean(axis=1)
            climb = cfg.ladder_z / (a_post_j * p0_mean / UTILITY_PRICE_SCALE)
            climb = np.clip(climb, *cfg.climb_bounds)
            r1 = np.exp(cfg.step_split * np.log1p(climb))
            r2 = (1.0 + climb) / r1
            p1 = p0 * r1[:, None]
            p2 = p1 * r2[:, None]
        else:
            p1 = p0 * cfg.tier_steps[0]
            p2 = p1 * cfg.tier_steps[1]
        ladders = np.stack([p0, p1, p2], axis=1)          # (J, 3, F)
        intercepts = _intercepts_for_group_share(cfg, p0, cross["sg0"], a_pre_j)
        mu_true = np.empty((j, 3, f))
        for tier, alpha in enumerate((a_pre_j, a_post_j, a_post_j)):
            mu_true[:, tier, :] = _implied_mu(ladders[:, tier, :], cross["cost"],
                                              intercepts, alpha, cfg.demand.sigma)
    elif cfg.price_mode == "nash_mu":
        # provisional intercepts from a cost-based price guess, then exact Nash
        guess = cross["cost"][:, None] * jitter
        intercepts = _intercepts_for_group_share(cfg, guess, cross["sg0"], a_pre_j)
        ladders = np.empty((j, 3, cfg.n_firms))
        mu_true = np.broadcast_to(cfg.mu_tiers[None, :, :], (j, 3, f)).copy()
        for tier, alpha in enumerate((a_pre_j, a_post_j, a_post_j)):
            sol = solve_nash(cross["size"], cross["cost"], intercepts, alpha,
                             cfg.demand.sigma, cfg.mu_tiers[tier][None, :])
            if not sol.converged:
                raise RuntimeError(f"tier {tier} Nash failed during generation")
            ladders[:, tier, :] = sol.prices
        for k in range(1, 3):  # keep ladders strictly increasing per firm
            ladders[:, k, :] = np.maximum(ladders[:, k, :], ladders[:, k - 1, :] * 1.001)
    else:
        raise ValueError(f"unknown price_mode {cfg.price_mode!r}")
    return ladders, intercepts, mu_true


def _tier_schedule(cfg, cross, rng):
    """Week each market reaches tiers 1 and 2.

    Adoption of the first increase follows a discrete hazard whose size
    advantage decays with log duration: bigger markets move first, and the
    size effect fades as they exhaust.  All markets adopt by the end.
    """
    j = cfg.n_markets
    z = np.log(cross["size"])
    z = (z - z.mean()) / max(z.std(), 1e-9)
    first_week = cfg.period_break + 1
    last = cfg.n_weeks - 2
    t1 = np.full(j, last, dtype=int)
    pending = np.ones(j, dtype=bool)
    for wk in range(first_week, last):
        dur = wk - cfg.period_break
        slope = cfg.size_effect - cfg.size_decay * np.log(dur)
        p = cfg.adoption_rate * _logistic(slope * z)
        hit = pending & (rng.random(j) < p)
        t1[hit] = wk
        pending &= ~hit
    gap = cfg.tier_gap_weeks + rng.integers(0, 3, j)
    t2 = np.minimum(t1 + gap, cfg.n_weeks - 1)
    tier = np.zeros((j, cfg.n_weeks), dtype=int)
    weeks = np.arange(cfg.n_weeks)[None, :]
    tier += (weeks >= t1[:, None]).astype(int)
    tier += (weeks >= t2[:, None]).astype(int)
    return tier, t1, t2


def _logistic(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def generate_panel(config, return_truth=True):
    """Draw a synthetic weekly panel; returns (Panel, truth dict).

    The Panel carries true market sizes and intercepts so closure tests can
    hand estimators the exact market environment; the sidecar records the
    planted parameters.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    j, f, t = cfg.n_markets, cfg.n_firms, cfg.n_weeks
    cross = _draw_cross_section(cfg, rng)
    ladders, intercepts, mu_true = _tier_ladders(cfg, cross, rng)
    tier, t1, t2 = _tier_schedule(cfg, cross, rng)

    # firm-specific AR(1) cost wedges around the drug-level cost path
    shocks = rng.normal(0.0, 1.0, (j, f, t))
    wedge = np.zeros((j, f, t))
    for k in range(1, t):
        wedge[:, :, k] = cfg.cost_rho * wedge[:, :, k - 1] + cfg.wedge_sd * shocks[:, :, k]
    drug_shock = rng.normal(0.0, 1.0, (j, t))
    drug_path = np.zeros((j, t))
    for k in range(1, t):
        drug_path[:, k] = cfg.cost_rho * drug_path[:, k - 1] + cfg.cost_sd * drug_shock[:, k]
    cost_jft = cross["cost"][:, None, None] * np.exp(drug_path[:, None, :] + wedge)

    xi = rng.normal(0.0, cfg.xi_sd, (j, f, t)) if cfg.xi_sd > 0 else np.zeros((j, f, t))

    # flatten (j, t) cells into independent games and solve weekly Nash
    alpha_cell = np.where(np.arange(t)[None, :] < cfg.period_break,
                          cfg.demand.alpha_pre, cfg.demand.alpha_post)
    alpha_cell = alpha_cell * cross["ascale"][:, None]
    mu_cell = mu_true[np.arange(j)[:, None], tier, :]                   # (J, T, F)
    ladder_cell = ladders[np.arange(j)[:, None], tier, :]               # (J, T, F)
    inter_cell = intercepts[:, None, :] + xi.transpose(0, 2, 1)         # (J, T, F)
    cost_cell = cost_jft.transpose(0, 2, 1)                             # (J, T, F)
    cost_game = cost_cell.mean(axis=2)                                  # drug-level path

    sol = solve_nash(
        np.broadcast_to(cross["size"][:, None], (j, t)).reshape(-1),
        cost_cell.reshape(-1, f),
        inter_cell.reshape(-1, f),
        alpha_cell.reshape(-1),
        cfg.demand.sigma,
        mu_cell.reshape(-1, f),
        start_prices=ladder_cell.reshape(-1, f),
    )
    if not sol.converged:
        raise RuntimeError("weekly Nash generation failed to converge")
    prices = sol.prices.reshape(j, t, f)
    shares = sol.shares.reshape(j, t, f)
    quantities = shares * cross["size"][:, None, None]

    drug_ids = np.array([f"D{k:04d}" for k in range(j)])
    frame = pd.DataFrame({
        "week": np.tile(np.repeat(np.arange(t), f), j),
        "drug_id": np.repeat(drug_ids, t * f),
        "firm": np.tile(np.array(cfg.firms[:f]), j * t),
        "price_clp": prices.reshape(-1),
        "quantity": quantities.reshape(-1),
        "wholesale_cost_clp": cost_cell.reshape(-1),
        "chronic": np.repeat(cross["chronic"], t * f),
        "refill_days": np.repeat(cross["refill"], t * f),
        "molecule": np.repeat(cross["molecule"], t * f),
        "prescription": np.repeat(cross["prescription"], t * f),
    })

    markets = {}
    for k, d in enumerate(drug_ids):
        markets[d] = Market(
            drug_id=d,
            market_size=float(cross["size"][k]),
            tier_prices={cfg.firms[i]: ladders[k, :, i] for i in range(f)},
            cost_path=cost_game[k],
            max_tier=2,
            chronic=bool(cross["chronic"][k]),
            refill_days=int(cross["refill"][k]),
            molecule=str(cross["molecule"][k]),
            delta_base={cfg.firms[i]: float(intercepts[k, i]) for i in range(f)},
            alpha_scale=float(cross["ascale"][k]),
        )
    panel = build_panel(frame, cfg.period_break, firms=cfg.firms[:f], markets=markets)

    truth = None
    if return_truth:
        truth = {
            "seed": cfg.seed,
            "demand": {
                "alpha_pre": float(np.mean(cfg.demand.alpha_pre)),
                "alpha_post": float(np.mean(cfg.demand.alpha_post)),
                "sigma": float(cfg.demand.sigma),
            },
            "price_mode": cfg.price_mode,
            "mu_tiers_mean": mu_true.mean(axis=0).tolist(),
            "market_size": {d: float(cross["size"][k]) for k, d in enumerate(drug_ids)},
            "base_cost": {d: float(cross["cost"][k]) for k, d in enumerate(drug_ids)},
            "intercepts": {d: intercepts[k].tolist() for k, d in enumerate(drug_ids)},
            "alpha_scale": {d: float(cross["ascale"][k]) for k, d in enumerate(drug_ids)},
            "tier1_week": {d: int(t1[k]) for k, d in enumerate(drug_ids)},
            "tier2_week": {d: int(t2[k]) for k, d in enumerate(drug_ids)},
        }
    return panel, truth


def spillover_params_from_truth(truth, firms=DEFAULT_FIRMS):
    mu = np.asarray(truth["mu_tiers_mean"], dtype=float)
    return SpilloverParams(mu=mu, mode="heterogeneous", firms=tuple(firms))


def write_truth(truth, path):
    with open(path, "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")


def generate_events(markets, demand_params, dynamic_params, trust_model,
                    horizon, seed, firms=DEFAULT_FIRMS, temperature=None):
    """Forward-simulate the coordination game; returns (events, truth dict).

    Thin wrapper over the dynamic module so the generating process and the
    estimated process share one implementation.
    """
    from .dynamic import CoordinationGame

    game = CoordinationGame(markets, demand_params, dynamic_params, trust_model,
                            firms=firms, temperature=temperature)
    game.solve()
    events = game.simulate(horizon, seed)
    truth = {
        "kappa": np.asarray(dynamic_params.kappa, dtype=float).tolist(),
        "mu": np.asarray(dynamic_params.mu, dtype=float).tolist(),
        "lambda0": float(dynamic_params.lambda0),
        "lambda1": float(dynamic_params.lambda1),
        "variant": dynamic_params.variant,
        "psi_bar": float(dynamic_params.psi_bar),
        "delta": float(dynamic_params.delta_discount),
        "temperature": float(game.temperature),
        "seed": int(seed),
        "horizon": int(horizon),
    }
    return events, truth
