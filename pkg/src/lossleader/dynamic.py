"""Dynamic sequential-coordination game: states, values, choice probabilities,
trust dynamics, value-function iteration, and forward simulation.

State per market is (price tier, market-wide trust state); firms decide each
week whether to target a market for a coordinated tier increase, who leads,
and whether followers comply.  Values solve the recursive system

    V    = psi * V_T + (1 - psi) * V_NT
    V_T  = rho * V_L + (1 - rho) * V_F
    V_L  = pi_L - kappa + delta * [tau*phi * E_succ V(l+1) + (1 - tau*phi) * V(l)]
    V_Fc = pi_all(l+1) - kappa + delta * E_succ V(l+1)
    V_Fd = pi_D(l)             + delta * V(l)
    V_F  = max(V_Fc, V_Fd)
    V_NT = pi_all(l)           + delta * V(l)

where E_succ averages over the trust transition restricted to strictly
higher states (success always advances trust; failure leaves it in place).

Value-difference magnitudes are CLP-sized, so every logit argument is divided
by a temperature; the default is the median |V_L - V_F| over states at the
one-period initialization.  This scale is surfaced in all outputs because no
published counterpart pins it down.  Values are computed internally in
thousands of CLP so the 1e-6 sup-norm stopping rule is far above float noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import DEFAULT_FIRMS
from .demand import compute_shares

#: CLP per internal value unit.
VALUE_UNIT = 1000.0

PROB_FLOOR = 1e-12


class BellmanConvergenceError(RuntimeError):
    """Raised when value iteration fails; carries the delta trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class DynamicParams:
    """Structural parameters of the coordination game (CLP units)."""

    kappa: np.ndarray                    # per-firm menu cost, >= 0
    mu: np.ndarray                       # per-firm spillover bonus
    lambda0: float = 0.0
    lambda1: float = 0.1
    delta_discount: float = 0.95
    psi_bar: float = 0.2
    variant: str = "trust_augmented"     # or "standard_mpe"

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if np.any(self.kappa < 0):
            raise ValueError("menu costs must be nonnegative")
        if not (0.0 <= self.delta_discount < 1.0):
            raise ValueError("discount factor must lie in [0, 1)")
        if not (0.0 <= self.psi_bar <= 1.0):
            raise ValueError("psi_bar must lie in [0, 1]")
        if self.variant == "standard_mpe":
            # near-certain compliance belief, flat in trust
            self.lambda0, self.lambda1 = 10.0, 0.0
        elif self.variant != "trust_augmented":
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be nonnegative")


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tau(trust_value, lambda0, lambda1):
    """Compliance belief 1 / (1 + exp(-(lambda0 + lambda1 * s)))."""
    return _sigmoid(lambda0 + lambda1 * np.asarray(trust_value, dtype=float))


def lambda_from_tau_anchors(tau_at_zero, tau_at_s, s):
    """Solve (lambda0, lambda1) from two belief anchors tau(0), tau(s)."""
    for v in (tau_at_zero, tau_at_s):
        if not (0.0 < v < 1.0):
            raise ValueError("anchor beliefs must lie strictly inside (0, 1)")
    logit = lambda p: np.log(p / (1.0 - p))
    lam0 = logit(tau_at_zero)
    lam1 = (logit(tau_at_s) - lam0) / s
    return float(lam0), float(lam1)


@dataclass
class TrustModel:
    """Discretized trust stock: grid values and a monotone transition matrix."""

    grid: np.ndarray
    transition: np.ndarray
    laplace_lambda: float = 0.5
    degenerate_rows: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        k = len(self.grid)
        if self.transition.shape != (k, k):
            raise ValueError("transition must be K x K")
        if not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to one")
        if np.any(np.tril(self.transition, k=-1) != 0):
            raise ValueError("transition must have no downward moves")
        if np.any(self.transition < 0):
            raise ValueError("transition entries must be nonnegative")

    @property
    def n_states(self):
        return len(self.grid)

    def assign(self, stock):
        """Nearest-grid-state index for a trust stock value."""
        stock = np.asarray(stock, dtype=float)
        mid = (self.grid[1:] + self.grid[:-1]) / 2.0
        return np.searchsorted(mid, stock, side="right")

    def success_transition(self):
        """Row-normalized transition restricted to strictly higher states.

        The top state maps to itself; success cannot move trust down.
        """
        k = self.n_states
        up = np.triu(self.transition, k=1)
        rows = up.sum(axis=1)
        out = np.zeros_like(up)
        for s in range(k):
            if rows[s] > 0:
                out[s] = up[s] / rows[s]
            elif s + 1 < k:
                out[s, s + 1] = 1.0  # no recorded upward mass: take one step
            else:
                out[s, s] = 1.0
        return out


def build_trust_transition(history, n_states=10, laplace_lambda=0.5, grid=None,
                           method="equal"):
    """Trust transition from transition counts or an event history.

    ``history`` is either a K x K count matrix or a DataFrame of simulated /
    classified events with ``week`` and ``success`` columns, from which the
    weekly trust-stock path and state transitions are derived.  Counts are
    Laplace-smoothed with pseudocount ``laplace_lambda``, downward moves are
    zeroed, and rows re-normalized.  ``method="kmeans"`` places grid points
    at 1-D k-means centroids of the observed stocks instead of equal spacing.
    """
    history_arr = np.asarray(history) if not isinstance(history, pd.DataFrame) else None
    if history_arr is not None and history_arr.ndim == 2 and history_arr.shape[0] == history_arr.shape[1]:
        counts = history_arr.astype(float)
        k = counts.shape[0]
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if grid is None:
            grid = np.arange(k, dtype=float)
        model_grid = np.asarray(grid, dtype=float)
    else:
        events = history
        k = int(n_states)
        weeks = int(events["week"].max()) + 1 if len(events) else 1
        successes = np.zeros(weeks)
        if len(events):
            agg = events.loc[events["success"] == 1].groupby("week").size()
            successes[agg.index.to_numpy()] = agg.to_numpy()
        stock = np.concatenate([[0.0], np.cumsum(successes)])
        if method == "kmeans":
            model_grid = _kmeans_grid(stock, k)
        else:
            top = max(stock.max(), float(k - 1))
            model_grid = np.linspace(0.0, top, k)
        mid = (model_grid[1:] + model_grid[:-1]) / 2.0
        idx = np.searchsorted(mid, stock, side="right")
        counts = np.zeros((k, k))
        for a, b in zip(idx[:-1], idx[1:]):
            counts[a, b] += 1.0

    lam = float(laplace_lambda)
    smoothed = (counts + lam) / (counts.sum(axis=1, keepdims=True) + lam * k)
    smoothed = np.triu(smoothed)
    degenerate = []
    for s in range(k):
        total = smoothed[s].sum()
        if total <= 0:
            smoothed[s, s] = 1.0  # no admissible mass after zeroing: absorb
            degenerate.append(s)
        else:
            smoothed[s] /= total
    return TrustModel(grid=model_grid, transition=smoothed,
                      laplace_lambda=lam, degenerate_rows=degenerate)


def _kmeans_grid(values, k, n_iter=50):
    """Plain 1-D Lloyd iterations; deterministic quantile initialization."""
    values = np.asarray(values, dtype=float)
    centers = np.quantile(values, np.linspace(0.0, 1.0, k))
    centers = np.unique(centers)
    while len(centers) < k:  # duplicate quantiles on sparse histories
        centers = np.sort(np.concatenate([centers, [centers.max() + 1.0]]))
    for _ in range(n_iter):
        mid = (centers[1:] + centers[:-1]) / 2.0
        lab = np.searchsorted(mid, values, side="right")
        new = centers.copy()
        for s in range(k):
            sel = values[lab == s]
            if sel.size:
                new[s] = sel.mean()
        if np.allclose(new, centers):
            break
        centers = np.sort(new)
    return centers


@dataclass
class ValueTables:
    """Solved values and choice probabilities, indexed [firm, market, tier, state].

    Value arrays are in thousands of CLP (``VALUE_UNIT``).
    """

    V: np.ndarray
    V_T: np.ndarray
    V_NT: np.ndarray
    V_L: np.ndarray
    V_F_comply: np.ndarray
    V_F_deviate: np.ndarray
    psi: np.ndarray          # [market, tier, state]
    rho: np.ndarray          # [firm, market, tier, state]
    compliance: np.ndarray   # [firm, market, tier, state]
    phi: np.ndarray          # [firm, market, tier, state]
    temperature: float
    iterations: int
    final_delta: float
    units: str = "thousand CLP"


class CoordinationGame:
    """Vectorized solver and simulator for the coordination game.

    Parameters
    ----------
    markets : dict of Market
        Must carry tier price ladders and delta_base intercepts.
    demand_params : DemandParams
        The post-period price coefficient drives all in-game demand.
    params : DynamicParams
    trust : TrustModel
    temperature : float or None
        Logit scale for all choice probabilities; None computes the
        initialization default.
    """

    def __init__(self, markets, demand_params, params, trust,
                 firms=DEFAULT_FIRMS, temperature=None, min_tiers=None):
        self.firms = tuple(firms)
        self.drug_ids = sorted(markets.keys())
        self.markets = markets
        self.demand = demand_params
        self.params = params
        self.trust = trust

        f = len(self.firms)
        j = len(self.drug_ids)
        self.max_tier = max(markets[d].max_tier for d in self.drug_ids)
        if min_tiers is not None:
            self.max_tier = max(self.max_tier, int(min_tiers) - 1)
        l_full = self.max_tier + 1
        self.n_tiers = l_full
        self.ladder = np.empty((j, l_full, f))
        self.cost = np.empty(j)
        self.size = np.empty(j)
        self.intercepts = np.empty((j, f))
        self.tier_cap = np.empty(j, dtype=int)
        self.alpha = np.empty(j)
        base_alpha = float(np.mean(np.asarray(demand_params.alpha_post)))
        for jj, d in enumerate(self.drug_ids):
            m = markets[d]
            self.tier_cap[jj] = m.max_tier
            self.cost[jj] = m.cost
            self.size[jj] = m.market_size
            self.alpha[jj] = base_alpha * getattr(m, "alpha_scale", 1.0)
            for ii, firm in enumerate(self.firms):
                ladder = np.asarray(m.tier_prices[firm], dtype=float)
                pad = ladder[-1] * (1.001 ** np.arange(1, l_full - len(ladder) + 1))
                self.ladder[jj, :, ii] = np.concatenate([ladder, pad])[:l_full]
                self.intercepts[jj, ii] = m.delta_base[firm]
        self.tau_states = tau(self.trust.grid, params.lambda0, params.lambda1)
        self.temperature = temperature
        self._flow_cache = None
        self.tables = None

    # ----- flow profits ---------------------------------------------------

    def _shares_at(self, price_matrix):
        alpha = self.alpha[:, None, None]
        delta = self.intercepts[:, None, :] - alpha * price_matrix / VALUE_UNIT
        return compute_shares(delta, self.demand.sigma).shares

    def flow_profit_arrays(self):
        """pi_all[i,j,l], pi_L[i,j,l], pi_D[i,j,l] in thousands of CLP.

        pi_L and pi_D are defined for l < max tier (last tier slot unused).
        """
        if self._flow_cache is not None:
            return self._flow_cache
        f = len(self.firms)
        j = len(self.drug_ids)
        l_full = self.n_tiers
        mu = self.params.mu[None, None, :]
        margin_all = self.ladder - self.cost[:, None, None] + mu       # (J, L, F)
        shares_all = self._shares_at(self.ladder)
        pi_all = (self.size[:, None, None] * shares_all * margin_all) / VALUE_UNIT
        pi_all = np.moveaxis(pi_all, 2, 0)                             # (F, J, L)

        pi_lead = np.zeros((f, j, l_full))
        pi_dev = np.zeros((f, j, l_full))
        for i in range(f):
            up = self.ladder[:, :-1, :].copy()
            up[:, :, i] = self.ladder[:, 1:, i]        # leader i one tier above
            s_up = self._shares_at(up)
            margin = self.ladder[:, 1:, i] - self.cost[:, None] + self.params.mu[i]
            pi_lead[i, :, :-1] = self.size[:, None] * s_up[:, :, i] * margin / VALUE_UNIT

            down = self.ladder[:, 1:, :].copy()
            down[:, :, i] = self.ladder[:, :-1, i]     # deviator i stays low
            s_dn = self._shares_at(down)
            margin = self.ladder[:, :-1, i] - self.cost[:, None] + self.params.mu[i]
            pi_dev[i, :, :-1] = self.size[:, None] * s_dn[:, :, i] * margin / VALUE_UNIT
        self._flow_cache = (pi_all, pi_lead, pi_dev)
        return self._flow_cache

    def flow_profits(self, drug_id, tier, role):
        """Per-firm weekly flow profit in CLP for one market and role."""
        jj = self.drug_ids.index(drug_id)
        if role in ("leader_up", "deviator_down") and tier + 1 > self.tier_cap[jj]:
            raise ValueError(f"tier {tier + 1} exceeds market cap {self.tier_cap[jj]}")
        if tier > self.tier_cap[jj]:
            raise ValueError(f"tier {tier} exceeds market cap {self.tier_cap[jj]}")
        pi_all, pi_lead, pi_dev = self.flow_profit_arrays()
        table = {"all_at_tier": pi_all, "leader_up": pi_lead, "deviator_down": pi_dev}
        try:
            return table[role][:, jj, tier] * VALUE_UNIT
        except KeyError:
            raise ValueError(f"unknown role {role!r}") from None

    # ----- value iteration ------------------------------------------------

    def _init_temperature(self, pi_all, pi_lead, pi_dev):
        kap = self.params.kappa[:, None, None] / VALUE_UNIT
        v_l0 = pi_lead[:, :, :-1] - kap
        v_f0 = np.maximum(pi_all[:, :, 1:] - kap, pi_dev[:, :, :-1])
        valid = np.arange(self.n_tiers - 1)[None, :] < self.tier_cap[:, None]
        gaps = np.abs(v_l0 - v_f0)[:, valid]
        med = float(np.median(gaps)) if gaps.size else 0.0
        return med if med > 0 else 1.0

    def _prepare(self):
        pi_all, pi_lead, pi_dev = self.flow_profit_arrays()
        if self.temperature is None:
            self.temperature = self._init_temperature(pi_all, pi_lead, pi_dev)
        return {
            "kap": self.params.kappa[:, None, None, None] / VALUE_UNIT,
            "pa": pi_all[..., None],
            "pl": pi_lead[:, :, :-1, None],
            "pdv": pi_dev[:, :, :-1, None],
            "pa_up": pi_all[:, :, 1:, None],
            "t_succ": self.trust.success_transition(),
            "tau_s": self.tau_states[None, None, None, :],
            "interior": (np.arange(self.n_tiers)[None, :]
                         < self.tier_cap[:, None]),
        }

    def _sweep(self, v, ctx):
        """One application of the value operator; returns (image, parts)."""
        f = len(self.firms)
        j = len(self.drug_ids)
        k = self.trust.n_states
        delta = self.params.delta_discount
        scale = self.temperature
        ev_succ = v @ ctx["t_succ"].T               # E[V(s', .)] after a success
        v_nt = ctx["pa"] + delta * v
        v_fc = ctx["pa_up"] - ctx["kap"] + delta * ev_succ[:, :, 1:, :]
        v_fd = ctx["pdv"] + delta * v[:, :, :-1, :]
        v_f = np.maximum(v_fc, v_fd)
        comp = np.clip(_sigmoid((v_fc - v_fd) / scale), PROB_FLOOR, 1 - PROB_FLOOR)
        prod_all = comp.prod(axis=0, keepdims=True)
        phi = np.clip(prod_all / comp, PROB_FLOOR, 1 - PROB_FLOOR)
        succ_prob = ctx["tau_s"] * phi
        v_l = (ctx["pl"] - ctx["kap"]
               + delta * (succ_prob * ev_succ[:, :, 1:, :]
                          + (1.0 - succ_prob) * v[:, :, :-1, :]))
        adv = (v_l - v_f) / scale
        adv -= adv.max(axis=0, keepdims=True)
        expadv = np.exp(adv)
        rho = expadv / expadv.sum(axis=0, keepdims=True)
        v_t = rho * v_l + (1.0 - rho) * v_f
        a_gain = (v_t - v_nt[:, :, :-1, :]).sum(axis=0)
        psi = np.zeros((j, self.n_tiers, k))
        psi[:, :-1, :] = self.params.psi_bar * _sigmoid(a_gain / scale)
        psi[~ctx["interior"]] = 0.0                 # terminal tiers never targeted
        v_new = v_nt.copy()
        v_new[:, :, :-1, :] += psi[None, :, :-1, :] * (v_t - v_nt[:, :, :-1, :])
        parts = dict(v_nt=v_nt, v_fc=v_fc, v_fd=v_fd, v_f=v_f, v_l=v_l,
                     v_t=v_t, comp=comp, phi=phi, rho=rho, psi=psi)
        return v_new, parts

    def _tables_from(self, v, parts, iterations, diff):
        f = len(self.firms)
        j = len(self.drug_ids)
        k = self.trust.n_states
        v_nt = parts["v_nt"]
        pad = v_nt[:, :, -1:, :]
        self.tables = ValueTables(
            V=v,
            V_T=np.concatenate([parts["v_t"], pad], axis=2),
            V_NT=v_nt,
            V_L=np.concatenate([parts["v_l"], pad], axis=2),
            V_F_comply=np.concatenate([parts["v_fc"], pad], axis=2),
            V_F_deviate=np.concatenate([parts["v_fd"], pad], axis=2),
            psi=parts["psi"],
            rho=np.concatenate([parts["rho"], np.full((f, j, 1, k), 1.0 / f)],
                               axis=2),
            compliance=np.concatenate(
                [parts["comp"], np.full((f, j, 1, k), 1.0 - PROB_FLOOR)], axis=2),
            phi=np.concatenate(
                [parts["phi"], np.full((f, j, 1, k), 1.0 - PROB_FLOOR)], axis=2),
            temperature=self.temperature, iterations=iterations,
            final_delta=diff,
        )
        return self.tables

    def solve(self, tol=1e-6, max_iter=5000, v_init=None, keep_trace=False,
              step_floor=0.05, step_init=1.0):
        """Iterate the value system to a sup-norm fixed point.

        Returns ValueTables; raises BellmanConvergenceError with the delta
        trace when the cap is hit.
        """
        f = len(self.firms)
        j = len(self.drug_ids)
        ctx = self._prepare()
        k = self.trust.n_states
        v = (np.zeros((f, j, self.n_tiers, k)) if v_init is None
             else v_init.copy())
        trace = []
        step = float(step_init)  # full Bellman steps unless the system oscillates
        prev_window = np.inf
        for it in range(1, max_iter + 1):
            v_new, parts = self._sweep(v, ctx)
            diff = float(np.max(np.abs(v_new - v)))  # undamped Bellman residual
            if keep_trace:
                trace.append(diff)
            if diff >= tol:
                v = v + step * (v_new - v)
                if it % 50 == 0:
                    if diff > 0.9 * prev_window:  # stalled or cycling: damp harder
                        step = max(step * 0.5, step_floor)
                    prev_window = diff
                continue
            # converged: take the exact Bellman image the parts define
            self.last_step = step
            self.last_trace = trace if keep_trace else None
            return self._tables_from(v_new, parts, it, diff)
        raise BellmanConvergenceError(
            f"value iteration hit {max_iter} iterations (last delta {diff:.3e})",
            trace=trace if keep_trace else None,
        )

    def _solve_anderson(self, tol=1e-6, max_iter=2000, v_init=None, window=4,
                        mix=1.0):
        """Anderson-accelerated fixed-point iteration.

        Plain iteration can cycle when the targeting feedback is locally
        expansive; the small-window least-squares mix breaks those cycles.
        Deterministic; raises with the residual trace on failure.
        """
        f = len(self.firms)
        j = len(self.drug_ids)
        ctx = self._prepare()
        shape = (f, j, self.n_tiers, self.trust.n_states)
        v = np.zeros(shape) if v_init is None else v_init.copy()
        hist_v, hist_r = [], []
        trace = []
        for it in range(1, max_iter + 1):
            image, parts = self._sweep(v, ctx)
            resid = image - v
            delta = float(np.max(np.abs(resid)))
            trace.append(delta)
            if delta < tol:
                return self._tables_from(image, parts, it, delta)
            hist_v.append(v.ravel())
            hist_r.append(resid.ravel())
            if len(hist_v) > window:
                hist_v.pop(0)
                hist_r.pop(0)
            if len(hist_r) == 1:
                v = v + mix * resid
                continue
            r_mat = np.stack(hist_r, axis=1)
            dr = r_mat[:, 1:] - r_mat[:, :-1]
            gamma, *_ = np.linalg.lstsq(dr, hist_r[-1], rcond=None)
            v_mat = np.stack(hist_v, axis=1)
            dv = v_mat[:, 1:] - v_mat[:, :-1]
            v_new = (hist_v[-1] + mix * hist_r[-1]
                     - (dv + mix * dr) @ gamma)
            if not np.all(np.isfinite(v_new)):
                hist_v, hist_r = [], []          # reset on breakdown
                v = v + 0.5 * resid
                continue
            v = v_new.reshape(shape)
        raise BellmanConvergenceError(
            f"accelerated value iteration hit {max_iter} iterations "
            f"(last delta {trace[-1]:.3e})", trace=trace)

    def _solve_root(self, tol=1e-6):
        """Dense root solve of T(v) - v = 0 for small (few-market) games."""
        from scipy.optimize import root

        f = len(self.firms)
        j = len(self.drug_ids)
        ctx = self._prepare()
        shape = (f, j, self.n_tiers, self.trust.n_states)
        if np.prod(shape) > 4000:
            raise BellmanConvergenceError(
                "root fallback is reserved for small games")

        def residual(flat):
            image, _ = self._sweep(flat.reshape(shape), ctx)
            return (image - flat.reshape(shape)).ravel()

        x0 = np.zeros(int(np.prod(shape)))
        sol = root(residual, x0, method="df-sane",
                   options={"maxfev": 20000, "fatol": tol / 10})
        if not sol.success or np.max(np.abs(sol.fun)) >= tol:
            sol = root(residual, sol.x, method="hybr")
        v = sol.x.reshape(shape)
        image, parts = self._sweep(v, ctx)
        diff = float(np.max(np.abs(image - v)))
        if diff >= tol:
            raise BellmanConvergenceError(
                f"root fallback left residual {diff:.3e}")
        return self._tables_from(image, parts, 1, diff)

    def solve_robust(self, tol=1e-6, tol_coarse=1e-4):
        """Layered solve: plain sweep, accelerated retry, per-market rescue.

        Markets are coupled only through the exogenous trust grid, so the
        fixed point decomposes by market; any market that resists the joint
        sweeps is solved on its own and stitched back in.
        """
        try:
            return self.solve(tol=tol, max_iter=5000)
        except BellmanConvergenceError:
            pass
        try:
            return self._solve_anderson(tol=tol)
        except BellmanConvergenceError:
            pass
        return self._solve_per_market(tol=tol)

    def _solve_per_market(self, tol=1e-6):
        """Solve each market's own game and stitch the tables together."""
        fields = ("V", "V_T", "V_NT", "V_L", "V_F_comply", "V_F_deviate",
                  "rho", "compliance", "phi")
        pieces = {name: [] for name in fields}
        psi_parts = []
        iters = 0
        worst = 0.0
        for d in self.drug_ids:
            sub = CoordinationGame({d: self.markets[d]}, self.demand,
                                   self.params, self.trust, firms=self.firms,
                                   temperature=self.temperature,
                                   min_tiers=self.n_tiers)
            try:
                tb = sub.solve(tol=tol, max_iter=5000)
            except BellmanConvergenceError:
                try:
                    tb = sub._solve_anderson(tol=tol, max_iter=4000, mix=0.5)
                except BellmanConvergenceError:
                    tb = sub._solve_root(tol=tol)
            for name in fields:
                pieces[name].append(getattr(tb, name))
            psi_parts.append(tb.psi)
            iters += tb.iterations
            worst = max(worst, tb.final_delta)
        stitched = {name: np.concatenate(pieces[name], axis=1)
                    for name in fields}
        self.tables = ValueTables(
            psi=np.concatenate(psi_parts, axis=0),
            temperature=self.temperature, iterations=iters, final_delta=worst,
            **stitched,
        )
        return self.tables

    # ----- simulation -----------------------------------------------------

    def simulate(self, horizon, seed, start_tiers=None, start_stock=0.0):
        """Forward-simulate coordination attempts; returns the event log.

        One row per attempted coordination (targeted market-week); empty log
        when psi_bar = 0.  Deterministic given the seed.
        """
        if self.tables is None:
            self.solve()
        tb = self.tables
        rng = np.random.default_rng(seed)
        f = len(self.firms)
        j = len(self.drug_ids)
        tiers = np.zeros(j, dtype=int) if start_tiers is None else np.array(start_tiers, dtype=int)
        stock = float(start_stock)
        rows = []
        for week in range(horizon):
            s_idx = int(self.trust.assign(stock))
            successes = 0
            u_target = rng.random(j)
            for jj in range(j):
                psi = tb.psi[jj, tiers[jj], s_idx]
                if u_target[jj] >= psi:
                    continue
                probs = tb.rho[:, jj, tiers[jj], s_idx]
                leader = int(rng.choice(f, p=probs / probs.sum()))
                comply_draws = rng.random(f)
                followers_ok = True
                for i in range(f):
                    if i == leader:
                        continue
                    if comply_draws[i] >= tb.compliance[i, jj, tiers[jj], s_idx]:
                        followers_ok = False
                success = int(followers_ok)
                rows.append({
                    "week": week,
                    "drug_id": self.drug_ids[jj],
                    "leader": self.firms[leader],
                    "targeted": 1,
                    "success": success,
                    "tier_from": int(tiers[jj]),
                    "tier_to": int(tiers[jj] + success),
                    "trust_state": s_idx,
                })
                if success:
                    tiers[jj] += 1
                    successes += 1
            stock += successes
        return pd.DataFrame(rows, columns=["week", "drug_id", "leader", "targeted",
                                           "success", "tier_from", "tier_to",
                                           "trust_state"])


# ----- module-level operation wrappers -------------------------------------

def solve_value_functions(markets, demand_params, params, trust,
                          firms=DEFAULT_FIRMS, temperature=None, tol=1e-6,
                          max_iter=5000):
    """Solve the game and return (game, tables)."""
    game = CoordinationGame(markets, demand_params, params, trust, firms=firms,
                            temperature=temperature)
    tables = game.solve(tol=tol, max_iter=max_iter)
    return game, tables


def choice_probs(tables, tier, trust_state):
    """(psi per market, rho per firm, phi per leader, compliance per follower)
    at a common (tier, trust-state) slice."""
    return (tables.psi[:, tier, trust_state],
            tables.rho[:, :, tier, trust_state],
            tables.phi[:, :, tier, trust_state],
            tables.compliance[:, :, tier, trust_state])


def simulate(markets, demand_params, params, trust, horizon, seed,
             firms=DEFAULT_FIRMS, temperature=None):
    """One-call forward simulation; see CoordinationGame.simulate."""
    game = CoordinationGame(markets, demand_params, params, trust, firms=firms,
                            temperature=temperature)
    game.solve()
    return game.simulate(horizon, seed)
