"""Two-stage GMM estimation of the demand system with lag/rupture instruments.

The log-linear inversion makes the structural residual

    xi = (ln s_ij - ln s_0) - X*beta + alpha_regime * p - sigma * ln s_i|g

linear in (alpha_pre, alpha_post, sigma) after firm-by-drug fixed effects are
absorbed by within-transformation, so the moment objective g'Wg is quadratic.
Stage 1 uses W = I, stage 2 the inverse residual moment covariance.  Bounds
(sigma <= sigma_bound, alpha >= alpha_min) are enforced by projected
quasi-Newton; binding bounds are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .data import UTILITY_PRICE_SCALE
from .demand import DemandParams


class InstrumentError(ValueError):
    """Raised for invalid instrument matrices (constants, NaNs, rank issues)."""


@dataclass
class RuptureConfig:
    """Change-point settings for the price-jump instrument."""

    penalty: float = 0.5     # cost reduction required per accepted split
    window: int = 8          # trailing weeks scanned for ruptures
    min_segment: int = 2


@dataclass
class InstrumentSet:
    """Instrument matrix keyed by (drug_id, firm, week) rows."""

    table: pd.DataFrame               # index columns drug_id, firm, week + Z columns
    provenance: dict = field(default_factory=dict)

    @property
    def columns(self):
        return [c for c in self.table.columns if c not in ("drug_id", "firm", "week")]

    def validate(self, n_params=None):
        z = self.table[self.columns]
        if z.isna().any().any():
            bad = z.columns[z.isna().any()][0]
            raise InstrumentError(f"instrument column {bad!r} has missing entries")
        const = [c for c in z.columns if np.ptp(z[c].to_numpy()) == 0]
        if const:
            raise InstrumentError(f"constant instrument columns: {const}")
        if n_params is not None and len(z.columns) < n_params:
            raise InstrumentError(
                f"{len(z.columns)} instruments cannot identify {n_params} parameters"
            )


@dataclass
class GmmResult:
    params: DemandParams
    theta: np.ndarray                 # (alpha_pre, alpha_post, sigma)
    theta_stage1: np.ndarray
    se: np.ndarray
    j_stat: float
    first_stage_f: dict
    binding: dict
    weight_stage1: np.ndarray
    weight_stage2: np.ndarray
    n_obs: int
    objective: float

    def to_json_dict(self):
        return {
            "alpha_pre": float(self.theta[0]),
            "alpha_post": float(self.theta[1]),
            "sigma": float(self.theta[2]),
            "se_alpha_pre": float(self.se[0]),
            "se_alpha_post": float(self.se[1]),
            "se_sigma": float(self.se[2]),
            "j_stat": float(self.j_stat),
            "first_stage_f": {k: float(v) for k, v in self.first_stage_f.items()},
            "binding": dict(self.binding),
            "n_obs": int(self.n_obs),
        }


def count_ruptures(series, penalty, min_segment=2):
    """Number of mean-shift change points found by binary segmentation.

    Cost of a segment is its sum of squared residuals around the segment
    mean; a split is accepted when it lowers total cost by more than
    ``penalty``.  Deterministic, O(n^2) per segment, fine at window sizes
    used for instruments.
    """
    x = np.asarray(series, dtype=float)

    def sse(seg):
        return float(np.sum((seg - seg.mean()) ** 2)) if seg.size else 0.0

    def split(lo, hi):
        seg = x[lo:hi]
        n = seg.size
        if n < 2 * min_segment:
            return 0
        base = sse(seg)
        best_gain, best_k = 0.0, None
        for k in range(min_segment, n - min_segment + 1):
            gain = base - sse(seg[:k]) - sse(seg[k:])
            if gain > best_gain:
                best_gain, best_k = gain, k
        if best_k is None or best_gain <= penalty:
            return 0
        return 1 + split(lo, lo + best_k) + split(lo + best_k, hi)

    return split(0, x.size)


def _shares_frame(panel):
    """Attach s_ij, s_0, s_i|g and the inverted dependent variable.

    Market-weeks whose quantities exhaust the market size (the peak week
    under the weekly sizing rule) have no interior outside share; those cells
    are dropped, mirroring the exclusion of empirical zeros upstream.
    """
    df = panel.frame.copy()
    sizes = {d: m.market_size for d, m in panel.markets.items()}
    df["market_size"] = df["drug_id"].map(sizes)
    grp = df.groupby(["drug_id", "week"])["quantity"]
    df["q_total"] = grp.transform("sum")
    if (df["quantity"] <= 0).any():
        raise ValueError(
            "zero empirical share encountered; exclude zero-quantity cells upstream"
        )
    df = df[df["q_total"] < df["market_size"]].copy()
    if not len(df):
        raise ValueError("no interior outside shares; market size rule violated")
    df["share"] = df["quantity"] / df["market_size"]
    df["share_outside"] = 1.0 - df["q_total"] / df["market_size"]
    df["share_cond"] = df["quantity"] / df["q_total"]
    df["y"] = np.log(df["share"]) - np.log(df["share_outside"])
    df["ln_cond"] = np.log(df["share_cond"])
    df["price_k"] = df["price_clp"] / UTILITY_PRICE_SCALE
    df["post"] = (df["week"] >= panel.period_break).astype(float)
    df["p_pre"] = df["price_k"] * (1.0 - df["post"])
    df["p_post"] = df["price_k"] * df["post"]
    return df


def build_instruments(panel, lag_depths=(1, 2), rupture_config=None):
    """Lagged-price, lagged-rival-price, lagged-share and rupture instruments.

    Rows start at week max(lag_depths) + rupture window; an error lists the
    required history when the panel is too short.
    """
    if rupture_config is None:
        rupture_config = RuptureConfig()
    lag_depths = sorted(set(int(x) for x in lag_depths))
    need = max(lag_depths) + 2
    df = _shares_frame(panel).sort_values(["drug_id", "firm", "week"])
    n_weeks = df["week"].nunique()
    if n_weeks < need:
        raise InstrumentError(
            f"panel spans {n_weeks} weeks; instruments need at least {need}"
        )

    by_df = df.groupby(["drug_id", "firm"], sort=False)
    rival_mean = (
        df.groupby(["drug_id", "week"])["price_k"].transform("sum") - df["price_k"]
    ) / (df.groupby(["drug_id", "week"])["price_k"].transform("count") - 1)
    df["rival_price"] = rival_mean

    cols = {}
    prov = {}
    for ell in lag_depths:
        cols[f"own_price_l{ell}"] = by_df["price_k"].shift(ell)
        prov[f"own_price_l{ell}"] = "lagged-own-price"
        cols[f"rival_price_l{ell}"] = by_df["rival_price"].shift(ell)
        prov[f"rival_price_l{ell}"] = "lagged-rival-price"
        cols[f"own_cond_share_l{ell}"] = by_df["ln_cond"].shift(ell)
        prov[f"own_cond_share_l{ell}"] = "lagged-share"

    zdf = pd.DataFrame(cols)
    zdf[["drug_id", "firm", "week"]] = df[["drug_id", "firm", "week"]]

    # rupture count on the lagged own-price trailing window; early weeks use
    # whatever history exists so the row start is governed by the lag depth
    w = rupture_config.window
    counts = np.zeros(len(df))
    pos = 0
    for _, g in df.groupby(["drug_id", "firm"], sort=False):
        prices = g["price_k"].to_numpy()
        for t in range(1, len(prices)):
            counts[pos + t] = count_ruptures(
                prices[max(0, t - w):t], rupture_config.penalty,
                rupture_config.min_segment)
        pos += len(prices)
    zdf["rupture_count"] = counts
    prov["rupture_count"] = "rupture-count"

    zdf = zdf.dropna().reset_index(drop=True)
    keep = [c for c in zdf.columns if c in ("drug_id", "firm", "week")
            or np.ptp(zdf[c].to_numpy()) > 0]
    dropped = [c for c in zdf.columns if c not in keep]
    for c in dropped:  # e.g. rupture counts on a jump-free panel
        prov[c] = prov.get(c, "") + " (dropped: constant)"
    out = InstrumentSet(table=zdf[keep], provenance=prov)
    out.validate()
    return out


def _design(panel, instruments):
    """Merge shares frame with instruments and within-transform by firm-by-drug."""
    df = _shares_frame(panel)
    zcols = instruments.columns
    merged = df.merge(instruments.table, on=["drug_id", "firm", "week"], how="inner")
    cols = ["y", "p_pre", "p_post", "ln_cond"] + list(zcols)
    demeaned = merged[cols] - merged.groupby(["drug_id", "firm"])[cols].transform("mean")
    y = demeaned["y"].to_numpy()
    q = np.column_stack([
        -demeaned["p_pre"].to_numpy(),
        -demeaned["p_post"].to_numpy(),
        demeaned["ln_cond"].to_numpy(),
    ])
    z = demeaned[list(zcols)].to_numpy()
    return y, q, z, merged


def moment_conditions(theta, panel, instruments):
    """Sample moments g = Z'xi / N and residual vector at theta.

    ``theta`` = (alpha_pre, alpha_post, sigma).
    """
    y, q, z, _ = _design(panel, instruments)
    theta = np.asarray(theta, dtype=float)
    xi = y - q @ theta
    g = z.T @ xi / len(xi)
    return g, xi


def estimate_gmm(panel, instruments, bounds=None, n_starts=5, seed=0):
    """Two-stage GMM with projected bounds and deterministic multi-start.

    The quadratic objective has a closed-form unconstrained minimizer which
    seeds the first start; remaining starts are fixed-seed perturbations so
    the whole procedure is deterministic.
    """
    if bounds is None:
        bounds = DemandParams()
    instruments.validate(n_params=3)
    y, q, z, merged = _design(panel, instruments)
    n = len(y)
    zscale = z.std(axis=0)
    z = z / zscale  # conditioning only; rescaling Z leaves the estimator invariant

    lo = np.array([bounds.alpha_min, bounds.alpha_min, 1e-6])
    hi = np.array([np.inf, np.inf, bounds.sigma_bound])
    box = list(zip(lo, hi))

    def solve_stage(weight):
        a = z.T @ q / n
        b = z.T @ y / n

        def objective(theta):
            g = b - a @ theta
            return g @ weight @ g

        def gradient(theta):
            # exact gradient of the quadratic moment objective
            return -2.0 * a.T @ weight @ (b - a @ theta)

        # closed-form unconstrained optimum, clipped into the box
        m = a.T @ weight @ a
        theta_cf = np.linalg.solve(m, a.T @ weight @ b)
        starts = [np.clip(theta_cf, lo, np.minimum(hi, 1e6))]
        rng = np.random.default_rng(seed)
        starts.append(np.array([0.1158, 0.0825, min(0.9, bounds.sigma_bound)]))
        starts.append(np.array([0.05, 0.05, bounds.sigma_bound / 2]))
        for _ in range(max(0, n_starts - len(starts))):
            starts.append(np.clip(theta_cf * rng.uniform(0.5, 1.5, 3), lo,
                                  np.minimum(hi, 1e6)))
        # the projected closed form is itself a candidate; optimizer runs can
        # only improve on it
        best_x = starts[0]
        best_fun = objective(best_x)
        for x0 in starts[:n_starts]:
            r = minimize(objective, x0, jac=gradient, method="L-BFGS-B", bounds=box,
                         options={"maxiter": 500, "ftol": 1e-18, "gtol": 1e-14})
            if np.isfinite(r.fun) and r.fun < best_fun:
                best_x, best_fun = r.x, r.fun
        if not np.isfinite(best_fun):
            raise RuntimeError("GMM optimizer failed to converge from all starts")
        return best_x, best_fun, a, b

    w1 = np.eye(z.shape[1])
    theta1, _, a, b = solve_stage(w1)

    xi1 = y - q @ theta1
    s_hat = (z * xi1[:, None]).T @ (z * xi1[:, None]) / n
    eigs = np.linalg.eigvalsh(s_hat)
    ridged = bool(eigs[0] <= 0 or eigs[-1] < 1e-12
                  or eigs[-1] / max(eigs[0], 1e-300) > 1e12)
    if ridged:
        s_hat = s_hat + 1e-8 * np.eye(len(s_hat))
    w2 = np.linalg.inv(s_hat)
    theta2, fun2, a, b = solve_stage(w2)

    g2 = b - a @ theta2
    j_stat = float(n * g2 @ w2 @ g2)

    # sandwich covariance at stage 2
    bread = np.linalg.inv(a.T @ w2 @ a)
    meat = a.T @ w2 @ s_hat @ w2 @ a
    cov = bread @ meat @ bread / n
    se = np.sqrt(np.diag(cov))

    binding = {
        "sigma_at_bound": bool(abs(theta2[2] - bounds.sigma_bound) < 1e-9),
        "alpha_pre_at_bound": bool(abs(theta2[0] - bounds.alpha_min) < 1e-9),
        "alpha_post_at_bound": bool(abs(theta2[1] - bounds.alpha_min) < 1e-9),
        "weight_ridged": ridged,
    }
    fstats = first_stage_f_from_design(merged, instruments.columns)
    params = DemandParams(alpha_pre=max(theta2[0], bounds.alpha_min),
                          alpha_post=max(theta2[1], bounds.alpha_min),
                          sigma=min(max(theta2[2], 1e-6), bounds.sigma_bound),
                          alpha_min=bounds.alpha_min, sigma_bound=bounds.sigma_bound)
    return GmmResult(params=params, theta=theta2, theta_stage1=theta1, se=se,
                     j_stat=j_stat,
                     first_stage_f=fstats, binding=binding,
                     weight_stage1=w1, weight_stage2=w2, n_obs=n, objective=fun2)


def first_stage_f_from_design(merged, zcols, endogenous=("price_k", "ln_cond")):
    """First-stage F statistic of each endogenous variable on the instruments."""
    out = {}
    cols = list(zcols) + list(endogenous)
    demeaned = merged[cols] - merged.groupby(["drug_id", "firm"])[cols].transform("mean")
    z = demeaned[list(zcols)].to_numpy()
    rank = np.linalg.matrix_rank(z)
    if rank < z.shape[1]:
        corr = np.corrcoef(z, rowvar=False)
        np.fill_diagonal(corr, 0.0)
        i, k = np.unravel_index(np.nanargmax(np.abs(corr)), corr.shape)
        raise InstrumentError(
            f"instrument matrix rank deficient; near-collinear columns "
            f"{zcols[i]!r} and {zcols[k]!r}"
        )
    n, q = z.shape
    for var in endogenous:
        x = demeaned[var].to_numpy()
        beta, _, _, _ = np.linalg.lstsq(z, x, rcond=None)
        resid = x - z @ beta
        rss_u = resid @ resid
        rss_r = x @ x  # restricted model is the (absorbed) constant only
        if rss_u <= 1e-300 * max(rss_r, 1.0):
            out[var] = 1e12
            continue
        f = ((rss_r - rss_u) / q) / (rss_u / (n - q))
        out[var] = float(min(f, 1e12))
    return out


def first_stage_f(z, endogenous):
    """F statistics from raw arrays (z: (n, q), endogenous: dict name -> (n,))."""
    z = np.asarray(z, dtype=float)
    z = z - z.mean(axis=0)
    if np.linalg.matrix_rank(z) < z.shape[1]:
        raise InstrumentError("instrument matrix rank deficient")
    n, q = z.shape
    out = {}
    for name, x in endogenous.items():
        x = np.asarray(x, dtype=float)
        x = x - x.mean()
        beta, _, _, _ = np.linalg.lstsq(z, x, rcond=None)
        resid = x - z @ beta
        rss_u = float(resid @ resid)
        rss_r = float(x @ x)
        if rss_u <= 1e-300 * max(rss_r, 1.0):
            out[name] = 1e12
            continue
        out[name] = float(min(((rss_r - rss_u) / q) / (rss_u / (n - q - 1)), 1e12))
    return out
