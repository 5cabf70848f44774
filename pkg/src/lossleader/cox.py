"""Cox proportional hazards with Breslow ties and time-varying interactions.

The partial likelihood is maximized by Newton iterations on the analytic
score and information matrix.  Time-varying covariate-by-log-duration
interactions are handled by episode splitting: each subject's follow-up is
cut at every distinct event time and the interaction column is evaluated at
the episode stop time, giving the standard counting-process likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class CoxError(RuntimeError):
    pass


@dataclass
class CoxFit:
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    concordance: float
    names: list
    ties: str = "breslow"
    n_events: int = 0
    n_obs: int = 0
    score_norm: float = 0.0
    iterations: int = 0

    def summary(self):
        z = self.coef / self.se
        return pd.DataFrame({
            "coef": self.coef, "se": self.se, "z": z,
        }, index=self.names)


def split_episodes(durations, events, covariates, time_varying=()):
    """Expand subjects into (start, stop] episodes cut at event times.

    ``time_varying`` lists covariate columns to interact with ln(t); the
    interaction is evaluated at each episode's stop time.  Returns arrays
    (start, stop, event, X) where X holds base covariates then interactions.
    """
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=int)
    cov = np.asarray(covariates, dtype=float)
    if cov.ndim == 1:
        cov = cov[:, None]
    if not len(time_varying):
        # no interactions: a single (0, t] episode per subject suffices
        return (np.zeros(len(durations)), durations.copy(), events.copy(),
                cov.copy())
    cuts = np.unique(durations[events == 1])
    starts, stops, evs, rows = [], [], [], []
    for i in range(len(durations)):
        t_i = durations[i]
        inner = cuts[cuts < t_i]
        bounds = np.concatenate([[0.0], inner, [t_i]])
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b <= a:
                continue
            starts.append(a)
            stops.append(b)
            evs.append(int(events[i] and b == t_i))
            rows.append(cov[i])
    start = np.asarray(starts)
    stop = np.asarray(stops)
    ev = np.asarray(evs)
    x_base = np.asarray(rows)
    blocks = [x_base]
    for col in time_varying:
        blocks.append(x_base[:, [col]] * np.log(stop)[:, None])
    return start, stop, ev, np.hstack(blocks)


def _breslow_quantities(beta, start, stop, ev, x, event_times):
    """Log partial likelihood, score, and information over event times."""
    eta = x @ beta
    w = np.exp(eta)
    ll = 0.0
    score = np.zeros_like(beta)
    info = np.zeros((len(beta), len(beta)))
    for t_e in event_times:
        at_risk = (start < t_e) & (stop >= t_e)
        died = at_risk & (ev == 1) & (stop == t_e)
        d = int(died.sum())
        if d == 0:
            continue
        wr = w[at_risk]
        xr = x[at_risk]
        s0 = wr.sum()
        s1 = xr.T @ wr
        s2 = (xr * wr[:, None]).T @ xr
        xbar = s1 / s0
        ll += eta[died].sum() - d * np.log(s0)
        score += x[died].sum(axis=0) - d * xbar
        info += d * (s2 / s0 - np.outer(xbar, xbar))
    return ll, score, info


def cox_fit(durations, events, covariates, time_varying=(), names=None,
            max_iter=100, tol=1e-10, ties="breslow", drop_base=(),
            on_separation="raise"):
    """Fit the proportional hazards model by Newton-Raphson.

    Parameters
    ----------
    durations, events : arrays (n,)
        Follow-up time (must be positive) and event indicator.
    covariates : array (n, p) or DataFrame
        Baseline covariates; no column may be constant.
    time_varying : sequence of column indices or names
        Each listed covariate also enters interacted with ln(duration),
        implemented by episode splitting.
    drop_base : sequence of column indices or names
        Base columns removed after their interactions are built (interaction-
        only terms).
    """
    if ties != "breslow":
        if ties != "efron":
            raise ValueError(f"ties must be 'breslow' or 'efron', got {ties!r}")
    if isinstance(covariates, pd.DataFrame):
        if names is None:
            names = list(covariates.columns)
        time_varying = [covariates.columns.get_loc(c) if isinstance(c, str) else c
                        for c in time_varying]
        drop_base = [covariates.columns.get_loc(c) if isinstance(c, str) else c
                     for c in drop_base]
        covariates = covariates.to_numpy(dtype=float)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if covariates.shape[0] != len(durations):
        covariates = covariates.T
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=int)
    if np.any(durations <= 0):
        raise ValueError("durations must be strictly positive")
    if events.sum() == 0:
        raise CoxError("no events")
    for c in range(covariates.shape[1]):
        if np.ptp(covariates[:, c]) == 0:
            raise ValueError(f"covariate column {c} is constant")
    if names is None:
        names = [f"x{c}" for c in range(covariates.shape[1])]
    names = list(names) + [f"{names[c]}:ln_t" for c in time_varying]

    start, stop, ev, x = split_episodes(durations, events, covariates,
                                        time_varying)
    if drop_base:
        keep = [c for c in range(x.shape[1]) if c not in set(drop_base)]
        x = x[:, keep]
        names = [names[c] for c in keep]
    sd = x.std(axis=0)
    x_sc = x / sd  # conditioning; coefficients rescaled back at the end
    event_times = np.unique(stop[ev == 1])

    beta = np.zeros(x.shape[1])
    ll_old = -np.inf
    for it in range(1, max_iter + 1):
        ll, score, info = _breslow_quantities(beta, start, stop, ev, x_sc,
                                              event_times)
        if not np.isfinite(ll):
            raise CoxError("partial likelihood diverged; possible separation")
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise CoxError("singular information matrix") from None
        # halve steps that overshoot (monotone likelihood safeguard)
        factor = 1.0
        for _ in range(30):
            cand = beta + factor * step
            ll_new, _, _ = _breslow_quantities(cand, start, stop, ev, x_sc,
                                               event_times)
            if ll_new >= ll - 1e-12:
                break
            factor /= 2.0
        beta = beta + factor * step
        if np.abs(ll_new - ll_old) < tol and np.linalg.norm(score) < 1e-6:
            break
        ll_old = ll_new
    ll, score, info = _breslow_quantities(beta, start, stop, ev, x_sc,
                                          event_times)
    if np.abs(beta).max() > 12:  # > 12 log points per sd of the covariate
        msg = "complete separation suspected; remove the offending covariate"
        if on_separation == "raise":
            raise CoxError(msg)
        import warnings
        warnings.warn(msg, stacklevel=2)
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov)) / sd
    beta_out = beta / sd
    conc = _concordance(beta, start, stop, ev, x_sc, event_times)
    return CoxFit(coef=beta_out, se=se, loglik=float(ll), concordance=conc,
                  names=names, ties="breslow", n_events=int(events.sum()),
                  n_obs=len(durations), score_norm=float(np.linalg.norm(score)),
                  iterations=it)


def _concordance(beta, start, stop, ev, x, event_times):
    """Within-risk-set concordance of the linear predictor at event times."""
    eta = x @ beta
    num = 0.0
    den = 0.0
    for t_e in event_times:
        at_risk = (start < t_e) & (stop >= t_e)
        died = at_risk & (ev == 1) & (stop == t_e)
        alive = at_risk & ~died
        if not alive.any():
            continue
        for e_eta in eta[died]:
            den += alive.sum()
            num += (e_eta > eta[alive]).sum() + 0.5 * (e_eta == eta[alive]).sum()
    return float(num / den) if den else np.nan


HAZARD_SPECS = {
    1: {"base": ["ln_size"], "tv": ["ln_size"]},
    2: {"base": ["ln_size", "elasticity", "chronic"], "tv": ["ln_size"]},
    3: {"base": ["ln_size", "elasticity", "chronic", "refill_days"],
        "tv": ["ln_size"]},
    4: {"base": ["ln_size", "elasticity", "chronic", "refill_days", "profit_std"],
        "tv": ["ln_size"]},
    5: {"base": ["ln_size", "elasticity", "chronic", "refill_days", "profit_std",
                 "cross_elast"], "tv": ["ln_size"]},
    6: {"base": ["chronic", "refill_days", "size_x_markup"], "tv": [], "drop": []},
    7: {"base": ["chronic", "refill_days", "size_x_chronic", "size_x_elast",
                 "ln_size"],
        "tv": ["size_x_chronic", "ln_size"], "drop": ["ln_size"]},
}


def hazard_covariates(panel, demand_result=None):
    """Drug-level covariate table for the coordination-timing regressions.

    Elasticities require a demand fit; specs that use them raise without one.
    """
    from .demand import compute_shares, cross_elasticity, own_elasticity

    rows = []
    post = panel.frame[panel.frame["week"] >= panel.period_break]
    for drug_id, m in panel.markets.items():
        g = post[post["drug_id"] == drug_id]
        price = g.groupby("firm")["price_clp"].mean()
        qty = g.groupby("firm")["quantity"].mean()
        profit = (g["price_clp"] - g["wholesale_cost_clp"]) * g["quantity"]
        markup = ((g["price_clp"] - g["wholesale_cost_clp"]) / g["price_clp"]).mean()
        row = {
            "drug_id": drug_id,
            "ln_size": np.log(m.market_size),
            "chronic": float(m.chronic),
            "refill_days": float(m.refill_days),
            "profit_std": float(profit.std()),
            "markup": float(markup),
        }
        if demand_result is not None:
            firms = sorted(price.index)
            p = price.reindex(firms).to_numpy()
            alpha = float(np.mean(np.asarray(demand_result.alpha_post)))
            sigma = demand_result.sigma
            inter = np.array([m.delta_base.get(f, 0.0) for f in firms]) if m.delta_base \
                else np.zeros(len(firms))
            delta = inter - alpha * p / 1000.0
            sr = compute_shares(delta, sigma)
            own = own_elasticity(alpha, sigma, p, sr)
            w = qty.reindex(firms).to_numpy()
            row["elasticity"] = float(np.average(own, weights=np.maximum(w, 1e-12)))
            pairs = [cross_elasticity(alpha, sigma, p, sr, i, k)
                     for i in range(len(firms)) for k in range(len(firms)) if i != k]
            row["cross_elast"] = float(np.mean(pairs))
        rows.append(row)
    df = pd.DataFrame(rows).set_index("drug_id")
    df["size_x_markup"] = df["ln_size"] * df["markup"]
    df["size_x_chronic"] = df["ln_size"] * df["chronic"]
    if "elasticity" in df.columns:
        df["size_x_elast"] = df["ln_size"] * df["elasticity"]
    return df


def event_durations(events, origin_week, round_id="all", horizon=None,
                    universe=None):
    """Durations (weeks since origin) of first/second successful increases.

    round 1: first success per drug, measured from ``origin_week``.
    round 2: second success, measured from the first.
    "all" pools both rounds.  With ``horizon`` given, drugs lacking the
    relevant event enter as right-censored at the horizon.
    """
    if "classification" in events.columns:
        succ = events[events["classification"] == "successful"]
    else:
        succ = events[events["success"] == 1]
    succ = succ.sort_values(["drug_id", "week"])
    grouped = succ.groupby("drug_id")["week"]
    first = grouped.min()
    second = grouped.apply(lambda s: s.iloc[1] if len(s) > 1 else np.nan).dropna()
    frames = []
    if round_id in ("1", 1, "all"):
        d = (first - origin_week).astype(float)
        frames.append(pd.DataFrame({"drug_id": first.index, "duration": d.to_numpy(),
                                    "event": 1, "round": 1}))
    if round_id in ("2", 2, "all"):
        base = first.reindex(second.index)
        d = (second - base).astype(float)
        frames.append(pd.DataFrame({"drug_id": second.index, "duration": d.to_numpy(),
                                    "event": 1, "round": 2}))
    out = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["drug_id", "duration", "event", "round"])
    out = out[out["duration"] > 0]
    if horizon is not None and round_id in ("1", 1, "all"):
        have = set(out.loc[out["round"] == 1, "drug_id"])
        pool = universe if universe is not None else events["drug_id"].unique()
        missing = [d for d in pool if d not in have]
        if missing:
            cens = pd.DataFrame({"drug_id": missing,
                                 "duration": float(horizon - origin_week),
                                 "event": 0, "round": 1})
            out = pd.concat([out, cens], ignore_index=True)
    return out


def coordination_hazard_table(panel, events, spec_id, demand_result=None,
                              round_id="all", censor_horizon=None):
    """Fit one published-table specification; returns (CoxFit, tidy rows)."""
    spec_id = int(spec_id)
    if spec_id not in HAZARD_SPECS:
        raise ValueError(f"unknown specification {spec_id}")
    spec = HAZARD_SPECS[spec_id]
    needs_demand = any(c in ("elasticity", "cross_elast", "size_x_elast")
                       for c in spec["base"] + spec["tv"])
    if needs_demand and demand_result is None:
        raise ValueError(f"specification {spec_id} requires a demand fit")
    cov = hazard_covariates(panel, demand_result)
    dur = event_durations(events, origin_week=panel.period_break,
                          round_id=round_id, horizon=censor_horizon,
                          universe=list(panel.markets))
    if not len(dur) or dur["event"].sum() == 0:
        raise CoxError("no events")
    dur = dur[dur["drug_id"].isin(cov.index)]
    x = cov.loc[dur["drug_id"], spec["base"]]
    tv = [spec["base"].index(c) for c in spec["tv"]]
    drop = [spec["base"].index(c) for c in spec.get("drop", [])]
    fit_res = cox_fit(dur["duration"].to_numpy(), dur["event"].to_numpy(),
                      x, time_varying=tv, names=spec["base"], drop_base=drop)
    rows = fit_res.summary().reset_index().rename(columns={"index": "covariate"})
    rows.insert(0, "spec", spec_id)
    rows.insert(1, "round", str(round_id))
    return fit_res, rows
