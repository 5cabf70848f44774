"""Command-line entry point wiring all stages into a reproducible pipeline.

Subcommands: synth, demand-fit, elasticities, nash, spillover-fit,
dynamic-fit, simulate, welfare, hazard, pipeline.  All randomness flows from
one base seed through fixed per-stage offsets, so a rerun with the same seed
reproduces every CSV byte for byte (figures excluded).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import cox as cox_mod
from . import plots
from .data import DEFAULT_FIRMS, Market, RunConfig, clp_to_usd, load_panel, save_panel
from .demand import DemandParams, compute_shares, cross_elasticity, own_elasticity
from .dynamic import DynamicParams, build_trust_transition
from .equilibrium import SpilloverParams, estimate_spillovers, solve_nash
from .gmm import build_instruments, estimate_gmm
from .nfxp import FitConfig, PenaltyConfig, bootstrap as nfxp_bootstrap, fit as nfxp_fit
from .reports import write_json, write_manifest, write_table
from .synth import SynthConfig, generate_events, generate_panel, write_truth
from .welfare import run_scenario, scenario_table

STAGE_SEED_OFFSETS = {
    "synth": 11, "demand-fit": 23, "elasticities": 31, "nash": 41,
    "spillover-fit": 43, "dynamic-fit": 53, "simulate": 61, "welfare": 71,
    "hazard": 83,
}


class StageError(RuntimeError):
    def __init__(self, message, exit_code=1):
        super().__init__(message)
        self.exit_code = exit_code


def _require(path, what):
    if not Path(path).exists():
        raise StageError(f"missing {what}: {path}", exit_code=2)
    return Path(path)


def _load_config(args):
    if getattr(args, "config", None):
        return RunConfig.load(_require(args.config, "config file"))
    return RunConfig()


def _stage_seed(base, stage):
    return int(base) + STAGE_SEED_OFFSETS[stage]


def _load_truth_markets(panel, truth_path, firms=DEFAULT_FIRMS):
    """Markets with generator-recorded sizes, ladders, and intercepts."""
    with open(truth_path) as fh:
        truth = json.load(fh)
    markets = {}
    for drug_id, m in panel.markets.items():
        if drug_id not in truth["market_size"]:
            continue
        markets[drug_id] = Market(
            drug_id=drug_id,
            market_size=float(truth["market_size"][drug_id]),
            tier_prices={f: np.asarray(truth["tier_prices"][drug_id][f])
                         for f in firms},
            cost_path=m.cost_path,
            max_tier=len(next(iter(truth["tier_prices"][drug_id].values()))) - 1,
            chronic=m.chronic,
            refill_days=m.refill_days,
            molecule=m.molecule,
            delta_base={f: truth["intercepts"][drug_id][i]
                        for i, f in enumerate(firms)},
        )
    return markets, truth


def _markets_for(args, panel):
    if getattr(args, "truth", None):
        return _load_truth_markets(panel, _require(args.truth, "truth sidecar"))[0]
    for m in panel.markets.values():
        if not m.delta_base:  # derive intercepts from observed tier-0 shares
            _attach_intercepts(panel)
        break
    return panel.markets


def _attach_intercepts(panel, alpha=None, sigma=None):
    """Back out per-firm mean-utility intercepts from pre-break averages."""
    from .demand import invert_shares

    params = DemandParams()
    alpha = params.alpha_pre if alpha is None else alpha
    sigma = params.sigma if sigma is None else sigma
    pre = panel.frame[panel.frame["week"] < panel.period_break]
    for drug_id, m in panel.markets.items():
        g = pre[pre["drug_id"] == drug_id]
        if not len(g):
            g = panel.frame[panel.frame["drug_id"] == drug_id]
        by_firm = g.groupby("firm")[["price_clp", "quantity"]].mean()
        firms = sorted(by_firm.index)
        q = by_firm["quantity"].to_numpy()
        p = by_firm["price_clp"].to_numpy()
        share = q / m.market_size
        outside = max(1.0 - share.sum(), 1e-9)
        cond = q / q.sum()
        delta = invert_shares(share, cond, outside, sigma)
        inter = delta + alpha * p / 1000.0
        m.delta_base = {f: float(inter[i]) for i, f in enumerate(firms)}


# ----- stage implementations -------------------------------------------------


def cmd_synth(args):
    t0 = time.time()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = {}
    if args.synth_config:
        with open(_require(args.synth_config, "synth config")) as fh:
            overrides = json.load(fh)
    cfg = SynthConfig(seed=_stage_seed(args.seed, "synth"), **overrides)
    panel, truth = generate_panel(cfg)
    truth["tier_prices"] = {
        d: {f: m.tier_prices[f].tolist() for f in panel.firms}
        for d, m in panel.markets.items()
    }
    save_panel(panel, out_dir / "panel.csv")
    write_truth(truth, out_dir / "truth.json")

    trust = build_trust_transition(np.zeros((10, 10)), laplace_lambda=0.5,
                                   grid=np.linspace(0, 3 * cfg.n_markets, 10))
    dyn = DynamicParams(kappa=np.array([1657.8e3, 2376.78e3, 1133.71e3]),
                        mu=np.array([2.81, 0.0, 0.0]), lambda0=-2.0, lambda1=0.5,
                        psi_bar=0.2)
    events, ev_truth = generate_events(panel.markets, cfg.demand, dyn, trust,
                                       horizon=args.horizon,
                                       seed=_stage_seed(args.seed, "synth") + 1)
    # coordination begins after the regime break: report panel-calendar weeks
    events["week"] = events["week"] + cfg.period_break
    events.to_csv(out_dir / "events.csv", index=False)
    truth["dynamic"] = ev_truth
    write_truth(truth, out_dir / "truth.json")
    write_manifest(out_dir, "synth", args.seed, overrides, [], t0)
    print(f"synth: wrote {out_dir}/panel.csv ({len(panel.frame)} rows), "
          f"events.csv ({len(events)} rows), truth.json")
    return 0


def cmd_demand_fit(args):
    t0 = time.time()
    cfg = _load_config(args)
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    if getattr(args, "truth", None):
        markets, _ = _load_truth_markets(panel, _require(args.truth, "truth sidecar"))
        panel.markets.update(markets)
    instruments = build_instruments(panel, lag_depths=tuple(args.lags))
    bounds = DemandParams(alpha_min=cfg.alpha_min, sigma_bound=cfg.sigma_bound)
    res = estimate_gmm(panel, instruments, bounds=bounds,
                       seed=_stage_seed(args.seed, "demand-fit"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(res.to_json_dict(), out)
    write_manifest(out.parent, "demand-fit", args.seed,
                   cfg.__dict__, [args.panel], t0)
    print(f"demand-fit: sigma={res.theta[2]:.4f} alpha_pre={res.theta[0]:.4f} "
          f"alpha_post={res.theta[1]:.4f} J={res.j_stat:.3f} -> {out}")
    return 0


def _demand_from_json(path):
    with open(_require(path, "demand parameter file")) as fh:
        d = json.load(fh)
    return DemandParams(alpha_pre=d["alpha_pre"], alpha_post=d["alpha_post"],
                        sigma=min(d["sigma"], 0.9),
                        alpha_min=min(0.01, d["alpha_post"], d["alpha_pre"]))


def cmd_elasticities(args):
    t0 = time.time()
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    params = _demand_from_json(args.params)
    markets = _markets_for(args, panel)
    post = panel.frame[panel.frame["week"] >= panel.period_break]
    rows = []
    for drug_id, m in markets.items():
        g = post[post["drug_id"] == drug_id]
        by_firm = g.groupby("firm")[["price_clp", "quantity"]].mean()
        firms = sorted(by_firm.index)
        p = by_firm["price_clp"].to_numpy()
        inter = np.array([m.delta_base[f] for f in firms])
        for period in ("pre", "post"):
            alpha = float(np.mean(np.asarray(params.alpha_for(period))))
            sr = compute_shares(inter - alpha * p / 1000.0, params.sigma)
            own = own_elasticity(alpha, params.sigma, p, sr)
            for i, f in enumerate(firms):
                cross = [cross_elasticity(alpha, params.sigma, p, sr, i, k)
                         for k in range(len(firms)) if k != i]
                rows.append({"drug_id": drug_id, "firm": f, "period": period,
                             "own_elasticity": float(own[i]),
                             "cross_elasticity_mean": float(np.mean(cross))})
    frame = pd.DataFrame(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(frame, out, title="Own and cross price elasticities by regime")
    if args.plot:
        plots.elasticity_histogram(frame, args.plot)
    write_manifest(out.parent, "elasticities", args.seed, {},
                   [args.panel, args.params], t0)
    summary = frame.groupby("period")["own_elasticity"].mean()
    print("elasticities: mean own by period "
          + ", ".join(f"{k}={v:.2f}" for k, v in summary.items()))
    return 0


def cmd_nash(args):
    t0 = time.time()
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    params = _demand_from_json(args.params)
    markets = _markets_for(args, panel)
    with open(_require(args.mu, "spillover file")) as fh:
        mu_json = json.load(fh)
    firms = sorted(mu_json["tiers"][f"Tier{args.tier}"])
    mu = np.array([mu_json["tiers"][f"Tier{args.tier}"][f] for f in firms])
    alpha = float(np.mean(np.asarray(params.alpha_for(args.period))))
    drug_ids = sorted(markets)
    inter = np.array([[markets[d].delta_base[f] for f in firms] for d in drug_ids])
    costs = np.array([markets[d].cost for d in drug_ids])
    sizes = np.array([markets[d].market_size for d in drug_ids])
    sol = solve_nash(sizes, costs, inter, alpha, params.sigma, mu[None, :],
                     probe_starts=args.probe_starts,
                     seed=_stage_seed(args.seed, "nash"))
    rows = []
    for jj, d in enumerate(drug_ids):
        for i, f in enumerate(firms):
            rows.append({"drug_id": d, "firm": f,
                         "price_clp": sol.prices[jj, i],
                         "share": sol.shares[jj, i],
                         "foc_residual": sol.foc_residuals[jj, i],
                         "converged": bool(sol.converged)})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(pd.DataFrame(rows), out,
                title=f"Bertrand-Nash prices, tier {args.tier} bonuses, "
                      f"{args.period} price sensitivity")
    write_manifest(out.parent, "nash", args.seed, {},
                   [args.panel, args.params, args.mu], t0)
    print(f"nash: converged={sol.converged} "
          f"max|FOC|={np.abs(sol.foc_residuals).max():.2e} -> {out}")
    return 0 if sol.converged else 1


def cmd_spillover_fit(args):
    t0 = time.time()
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    params = _demand_from_json(args.params)
    markets = _markets_for(args, panel)
    mode = {"hom": "homogeneous", "het": "heterogeneous"}[args.mode]
    firms = sorted(next(iter(markets.values())).tier_prices)
    drug_ids = sorted(markets)
    inter = np.array([[markets[d].delta_base[f] for f in firms] for d in drug_ids])
    costs = np.array([markets[d].cost for d in drug_ids])
    sizes = np.array([markets[d].market_size for d in drug_ids])
    tiers = args.tier if args.tier is not None else [0, 1, 2]
    result = {"mode": mode, "tiers": {},
              "identifying_assumption":
                  "static Bertrand-Nash pricing within each tier; spillover and "
                  "conduct are observationally equivalent under this assumption"}
    for tier in np.atleast_1d(tiers):
        tier = int(tier)
        obs = np.array([[markets[d].tier_prices[f][tier] for f in firms]
                        for d in drug_ids])
        alpha = float(np.mean(np.asarray(
            params.alpha_for("pre" if tier == 0 else "post"))))
        mu_hat = estimate_spillovers(obs, sizes, costs, inter, alpha, params.sigma,
                                     mode=mode, seed=_stage_seed(args.seed,
                                                                 "spillover-fit"),
                                     pool=args.pool)
        result["tiers"][f"Tier{tier}"] = {f: float(mu_hat[i])
                                          for i, f in enumerate(firms)}
        if np.any(mu_hat < 0):
            result.setdefault("warnings", []).append(
                f"Tier{tier}: negative fitted bonus")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(result, out)
    rows = [{"tier": t, **vals} for t, vals in result["tiers"].items()]
    write_table(pd.DataFrame(rows), out.with_suffix(".csv"),
                title="Fitted per-customer spillover bonuses (CLP)")
    write_manifest(out.parent, "spillover-fit", args.seed, {},
                   [args.panel, args.params], t0)
    print(f"spillover-fit[{mode}]: "
          + "; ".join(f"{t}: " + ", ".join(f"{f}={v:,.1f}" for f, v in vals.items())
                      for t, vals in result["tiers"].items()))
    return 0


def cmd_dynamic_fit(args):
    t0 = time.time()
    cfg = _load_config(args)
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    events = pd.read_csv(_require(args.events, "event log"))
    if len(events) and events["week"].min() >= panel.period_break:
        # panel-calendar log: shift onto the game clock that starts at the break
        events = events.assign(week=events["week"] - panel.period_break)
    markets = _markets_for(args, panel)
    variant = {"trust": "trust_augmented", "mpe": "standard_mpe"}[args.variant]
    fit_cfg = FitConfig(delta=cfg.delta, psi_bar=cfg.psi_bar,
                        trust_states=cfg.trust_states_K,
                        laplace_lambda=cfg.laplace_lambda,
                        inner_tol=cfg.inner_tol, outer_tol=cfg.outer_tol,
                        max_outer_iter=cfg.max_outer_iter,
                        seed=_stage_seed(args.seed, "dynamic-fit"),
                        n_starts=args.starts)
    demand = _demand_from_json(args.params) if args.params else DemandParams()
    res, x_hat, trust = nfxp_fit(events, markets, demand, fit_cfg,
                                 variant=variant, n_weeks=args.horizon,
                                 temperature=args.temperature)
    payload = {
        "variant": variant,
        "kappa_thousand_clp": (res.kappa / 1e3).tolist(),
        "kappa_usd": clp_to_usd(res.kappa, cfg.clp_per_usd).tolist(),
        "mu_clp": res.mu.tolist(),
        "mu_usd": clp_to_usd(res.mu, cfg.clp_per_usd).tolist(),
        "lambda0": res.lambda0, "lambda1": res.lambda1,
        "tau": res.tau_report,
        "loglik": res.loglik, "penalty": res.penalty,
        "converged": res.converged,
        "outer_iterations": res.outer_iterations,
        "logit_temperature_thousand_clp": res.temperature,
        "discount": cfg.delta, "psi_bar": cfg.psi_bar,
    }
    if args.bootstrap > 0:
        payload["bootstrap"] = nfxp_bootstrap(
            events, markets, demand, fit_cfg, variant=variant,
            n_draws=args.bootstrap, seed=_stage_seed(args.seed, "dynamic-fit") + 1,
            n_weeks=args.horizon, trust_model=trust, x_hat=x_hat)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(payload, out)
    firms = DEFAULT_FIRMS
    rows = [{"parameter": f"kappa_{f}",
             "thousand_clp": payload["kappa_thousand_clp"][i],
             "usd": payload["kappa_usd"][i]} for i, f in enumerate(firms)]
    rows += [{"parameter": f"mu_{f}", "thousand_clp": res.mu[i] / 1e3,
              "usd": payload["mu_usd"][i]} for i, f in enumerate(firms)]
    rows += [{"parameter": f"tau_{s}", "thousand_clp": v, "usd": float("nan")}
             for s, v in res.tau_report.items()]
    write_table(pd.DataFrame(rows), out.with_suffix(".csv"),
                title=f"Dynamic coordination estimates ({variant})")
    write_manifest(out.parent, "dynamic-fit", args.seed, cfg.__dict__,
                   [args.panel, args.events], t0)
    print(f"dynamic-fit[{variant}]: kappa(000)={np.round(res.kappa / 1e3, 1)} "
          f"tau={res.tau_report} LL={res.loglik:.2f} converged={res.converged}")
    return 0


def cmd_simulate(args):
    t0 = time.time()
    with open(_require(args.params, "dynamic parameter file")) as fh:
        dyn_json = json.load(fh)
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    markets = _markets_for(args, panel)
    params = DynamicParams(
        kappa=np.asarray(dyn_json["kappa_thousand_clp"]) * 1e3,
        mu=np.asarray(dyn_json["mu_clp"]),
        lambda0=dyn_json["lambda0"], lambda1=dyn_json["lambda1"],
        delta_discount=dyn_json.get("discount", 0.95),
        psi_bar=dyn_json.get("psi_bar", 0.2),
        variant=dyn_json.get("variant", "trust_augmented"),
    )
    trust = build_trust_transition(np.zeros((10, 10)), laplace_lambda=0.5,
                                   grid=np.linspace(0, 3 * len(markets), 10))
    from .dynamic import simulate as run_sim
    events = run_sim(markets, DemandParams(), params, trust, args.horizon,
                     seed=_stage_seed(args.seed, "simulate"),
                     temperature=dyn_json.get("logit_temperature_thousand_clp"))
    events["week"] = events["week"] + panel.period_break
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    events.to_csv(out, index=False)
    if args.plot:
        plots.cumulative_events_figure(events, args.plot)
    write_manifest(out.parent, "simulate", args.seed, dyn_json,
                   [args.params, args.panel], t0)
    print(f"simulate: {len(events)} attempts, "
          f"{int(events['success'].sum()) if len(events) else 0} successes -> {out}")
    return 0


def cmd_welfare(args):
    t0 = time.time()
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    demand = _demand_from_json(args.params)
    markets = _markets_for(args, panel)
    with open(_require(args.mu, "spillover file")) as fh:
        mu_json = json.load(fh)
    firms = sorted(mu_json["tiers"]["Tier0"])
    spill = SpilloverParams(
        mu=np.array([[mu_json["tiers"][f"Tier{t}"][f] for f in firms]
                     for t in (0, 1, 2)]),
        mode=mu_json.get("mode", "heterogeneous"), firms=tuple(firms))
    with open(_require(args.dynamic, "dynamic fit file")) as fh:
        dyn_json = json.load(fh)
    dyn = DynamicParams(
        kappa=np.asarray(dyn_json["kappa_thousand_clp"]) * 1e3,
        mu=np.asarray(dyn_json["mu_clp"]),
        lambda0=dyn_json["lambda0"], lambda1=dyn_json["lambda1"],
        delta_discount=dyn_json.get("discount", 0.95),
        psi_bar=dyn_json.get("psi_bar", 0.2),
        variant=dyn_json.get("variant", "trust_augmented"),
    )
    trust = build_trust_transition(np.zeros((10, 10)), laplace_lambda=0.5,
                                   grid=np.linspace(0, 3 * len(markets), 10))
    labels = (["post_ban", "pre_ban_elasticity", "pre_ban_T1", "pre_ban_T0"]
              if args.scenario == "all" else [args.scenario])
    reports = []
    for label in labels:
        reports.append(run_scenario(
            label, markets, demand, spill, dyn, trust, horizon=args.horizon,
            seed=_stage_seed(args.seed, "welfare"), n_paths=args.paths,
            temperature=args.temperature,
            include_spillover_ps=args.include_spillover_ps))
    table = scenario_table(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, out, title="Welfare effects by scenario (million CLP)")
    weekly = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    write_table(weekly, out.with_name(out.stem + "_weekly.csv"),
                title="Weekly welfare paths by scenario (million CLP)")
    if args.plot:
        plots.welfare_curves_figure(reports, args.plot)
        plots.price_path_figure(
            reports, Path(args.plot).with_name("price_paths" + Path(args.plot).suffix))
    write_manifest(out.parent, "welfare", args.seed, {},
                   [args.panel, args.params, args.mu, args.dynamic], t0)
    for r in reports:
        print(f"welfare[{r.label}]: acc dCS={r.cumulative_cs:,.1f}M "
              f"acc dPS={r.cumulative_ps:,.1f}M DWL={r.cumulative_dwl:,.1f}M")
    return 0


def cmd_hazard(args):
    t0 = time.time()
    panel = load_panel(_require(args.panel, "panel"), period_break=args.period_break)
    events = pd.read_csv(_require(args.events, "event log"))
    demand = _demand_from_json(args.params) if args.params else None
    _markets_for(args, panel)  # ensures intercepts exist for elasticity covariates
    if demand is not None:
        for m in panel.markets.values():
            if not m.delta_base:
                _attach_intercepts(panel)
            break
    fit_res, rows = cox_mod.coordination_hazard_table(
        panel, events, args.spec, demand_result=demand, round_id=args.round,
        censor_horizon=args.censor_horizon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(rows, out, title=f"Coordination timing hazard, spec {args.spec}")
    write_manifest(out.parent, "hazard", args.seed, {},
                   [args.panel, args.events], t0)
    print(f"hazard spec {args.spec} round {args.round}: "
          f"concordance={fit_res.concordance:.3f} events={fit_res.n_events}")
    return 0


def cmd_pipeline(args):
    """synth -> demand-fit -> elasticities -> spillover-fit -> dynamic-fit ->
    simulate -> welfare -> hazard, failing fast with the stage name."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    stages = []

    def run(stage, fn, ns):
        stages.append(stage)
        code = fn(ns)
        if code != 0:
            raise StageError(f"stage {stage} failed with exit code {code}",
                             exit_code=code)

    base = argparse.Namespace(seed=args.seed, config=args.config,
                              period_break=args.period_break, truth=None)
    try:
        ns = argparse.Namespace(**vars(base), out_dir=str(out_dir),
                                synth_config=args.synth_config,
                                horizon=args.horizon)
        run("synth", cmd_synth, ns)
        truth = str(out_dir / "truth.json")
        panel = str(out_dir / "panel.csv")

        ns = argparse.Namespace(**vars(base), panel=panel, lags=[1, 2],
                                out=str(out_dir / "demand_params.json"))
        ns.truth = truth
        run("demand-fit", cmd_demand_fit, ns)
        dparams = str(out_dir / "demand_params.json")

        ns = argparse.Namespace(**vars(base), panel=panel, params=dparams,
                                out=str(out_dir / "elasticities.csv"),
                                plot=str(out_dir / "elasticities.svg") if args.plot else None)
        ns.truth = truth
        run("elasticities", cmd_elasticities, ns)

        ns = argparse.Namespace(**vars(base), panel=panel, params=dparams,
                                mode=args.spillover_mode, tier=None,
                                pool="pooled", out=str(out_dir / "mu.json"))
        ns.truth = truth
        run("spillover-fit", cmd_spillover_fit, ns)

        ns = argparse.Namespace(**vars(base), panel=panel, params=dparams,
                                events=str(out_dir / "events.csv"),
                                variant=args.variant, bootstrap=args.bootstrap,
                                horizon=args.horizon, starts=args.starts,
                                temperature=None,
                                out=str(out_dir / "dyn_fit.json"))
        ns.truth = truth
        run("dynamic-fit", cmd_dynamic_fit, ns)

        ns = argparse.Namespace(**vars(base), params=str(out_dir / "dyn_fit.json"),
                                panel=panel, horizon=args.horizon,
                                out=str(out_dir / "sim_events.csv"),
                                plot=str(out_dir / "cumulative_events.svg") if args.plot else None)
        ns.truth = truth
        run("simulate", cmd_simulate, ns)

        ns = argparse.Namespace(**vars(base), panel=panel, params=dparams,
                                mu=str(out_dir / "mu.json"),
                                dynamic=str(out_dir / "dyn_fit.json"),
                                scenario="all", horizon=20, paths=args.paths,
                                include_spillover_ps=False, temperature=None,
                                out=str(out_dir / "welfare.csv"),
                                plot=str(out_dir / "welfare.svg") if args.plot else None)
        ns.truth = truth
        run("welfare", cmd_welfare, ns)

        ns = argparse.Namespace(**vars(base), panel=panel,
                                events=str(out_dir / "events.csv"),
                                params=dparams, spec=args.hazard_spec,
                                round="all", censor_horizon=None,
                                out=str(out_dir / "cox.csv"))
        ns.truth = truth
        run("hazard", cmd_hazard, ns)
    except StageError as err:
        write_manifest(out_dir, f"pipeline[{' '.join(stages)}]", args.seed,
                       {"failed_stage": stages[-1]}, [], t0, status="failed")
        print(f"pipeline failed at stage {stages[-1]}: {err}", file=sys.stderr)
        return err.exit_code
    write_manifest(out_dir, "pipeline", args.seed,
                   {"stages": stages}, [out_dir / "panel.csv"], t0)
    print(f"pipeline: completed {len(stages)} stages in {time.time() - t0:.0f}s "
          f"-> {out_dir}")
    return 0


# ----- argument parsing -------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(
        prog="lossleader",
        description="Structural pipeline for loss-leader pricing and "
                    "sequential price coordination",
    )
    ap.add_argument("--config", default=None, help="config.json path")
    ap.add_argument("--seed", type=int, default=0, help="base seed for all stages")
    ap.add_argument("--workers", type=int, default=1,
                    help="worker cap for parallel sections (vectorized code "
                         "mostly ignores this)")
    ap.add_argument("--period-break", type=int, default=None,
                    help="week index separating the pre and post regimes")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic panel + events + truth")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--synth-config", default=None)
    s.add_argument("--horizon", type=int, default=20)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("demand-fit", help="two-stage GMM demand estimation")
    s.add_argument("--panel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lags", type=int, nargs="+", default=[1, 2])
    s.add_argument("--truth", default=None,
                   help="synthetic-world sidecar with generator market sizes")
    s.set_defaults(func=cmd_demand_fit)

    s = sub.add_parser("elasticities", help="own/cross elasticity report")
    s.add_argument("--panel", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", default=None)
    s.add_argument("--plot", default=None)
    s.set_defaults(func=cmd_elasticities)

    s = sub.add_parser("nash", help="solve Bertrand-Nash prices at given bonuses")
    s.add_argument("--panel", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--mu", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tier", type=int, default=0)
    s.add_argument("--period", choices=("pre", "post"), default="post")
    s.add_argument("--probe-starts", type=int, default=0)
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_nash)

    s = sub.add_parser("spillover-fit", help="fit spillover bonuses by price matching")
    s.add_argument("--panel", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tier", type=int, nargs="+", default=None)
    s.add_argument("--mode", choices=("hom", "het"), default="het")
    s.add_argument("--pool", choices=("pooled", "per_market_mean"), default="pooled")
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_spillover_fit)

    s = sub.add_parser("dynamic-fit", help="nested fixed-point likelihood fit")
    s.add_argument("--events", required=True)
    s.add_argument("--panel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--params", default=None)
    s.add_argument("--variant", choices=("trust", "mpe"), default="trust")
    s.add_argument("--bootstrap", type=int, default=0)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--starts", type=int, default=3)
    s.add_argument("--temperature", type=float, default=None)
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_dynamic_fit)

    s = sub.add_parser("simulate", help="forward-simulate the coordination game")
    s.add_argument("--params", required=True)
    s.add_argument("--panel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=int, default=20)
    s.add_argument("--plot", default=None)
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("welfare", help="scenario welfare analysis")
    s.add_argument("--panel", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--mu", required=True)
    s.add_argument("--dynamic", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scenario", default="all")
    s.add_argument("--horizon", type=int, default=20)
    s.add_argument("--paths", type=int, default=3)
    s.add_argument("--include-spillover-ps", action="store_true")
    s.add_argument("--temperature", type=float, default=None,
                   help="logit scale for scenario runs (default: calibrated "
                        "constant)")
    s.add_argument("--plot", default=None)
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_welfare)

    s = sub.add_parser("hazard", help="coordination-timing Cox regressions")
    s.add_argument("--panel", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spec", type=int, default=1)
    s.add_argument("--round", default="all")
    s.add_argument("--params", default=None)
    s.add_argument("--censor-horizon", type=int, default=None)
    s.add_argument("--truth", default=None)
    s.set_defaults(func=cmd_hazard)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--synth-config", default=None)
    s.add_argument("--horizon", type=int, default=20)
    s.add_argument("--variant", choices=("trust", "mpe"), default="trust")
    s.add_argument("--bootstrap", type=int, default=0)
    s.add_argument("--starts", type=int, default=1)
    s.add_argument("--paths", type=int, default=2)
    s.add_argument("--spillover-mode", choices=("hom", "het"), default="het")
    s.add_argument("--hazard-spec", type=int, default=1)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        print(str(err), file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
