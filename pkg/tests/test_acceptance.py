"""Acceptance suite: one test per release criterion, printed pass/fail lines.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
summary.  Tolerances are fixed here, not configurable.
"""

import json
import time

import numpy as np
import pandas as pd
import pytest

from lossleader.cli import main as cli_main
from lossleader.cox import coordination_hazard_table, cox_fit
from lossleader.data import UTILITY_PRICE_SCALE
from lossleader.demand import (DemandParams, compute_shares,
                               cross_elasticity_matrix, delta_from_prices,
                               own_elasticity)
from lossleader.dynamic import (CoordinationGame, DynamicParams,
                                build_trust_transition, tau)
from lossleader.equilibrium import (SpilloverParams, estimate_spillovers,
                                    profit, recover_costs, solve_nash)
from lossleader.events import SUCCESSFUL, classify_events
from lossleader.gmm import build_instruments, estimate_gmm
from lossleader.nfxp import FitConfig, bootstrap, fit
from lossleader.synth import DEFAULT_MU_TIERS, SynthConfig, generate_events, generate_panel
from lossleader.welfare import DEFAULT_SCENARIO_TEMPERATURE, run_scenario

PASS = "PASS"
FAIL = "FAIL"


def report(name, ok, detail=""):
    line = f"[{PASS if ok else FAIL}] {name}" + (f" :: {detail}" if detail else "")
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 1. Share calculus


def test_criterion_1_share_calculus():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst_sum = 0.0
    worst_rel = 0.0
    for _ in range(1000):
        delta = rng.normal(0.0, 1.5, 3)
        sigma = rng.uniform(0.1, 0.9)
        alpha = rng.uniform(0.02, 0.25)
        p = rng.uniform(2000.0, 30000.0, 3)
        inter = delta + alpha * p / UTILITY_PRICE_SCALE
        res = compute_shares(delta, sigma)
        worst_sum = max(worst_sum, abs(res.shares.sum() + res.outside - 1.0))
        mat = cross_elasticity_matrix(alpha, sigma, p, res)
        h = 1e-5 * p
        for k in range(3):
            up, dn = p.copy(), p.copy()
            up[k] += h[k]
            dn[k] -= h[k]
            s_up = compute_shares(delta_from_prices(inter, alpha, up), sigma).shares
            s_dn = compute_shares(delta_from_prices(inter, alpha, dn), sigma).shares
            fd = (s_up - s_dn) / (2 * h[k]) * p[k] / res.shares
            rel = np.abs(mat[:, k] - fd) / np.maximum(np.abs(fd), 1e-12)
            worst_rel = max(worst_rel, float(rel.max()))
    elapsed = time.time() - t0
    report("1 share calculus",
           worst_sum < 1e-12 and worst_rel < 1e-6 and elapsed < 10.0,
           f"sum err {worst_sum:.2e}, fd rel {worst_rel:.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. Nash certification


def test_criterion_2_nash_certification():
    t0 = time.time()
    rng = np.random.default_rng(202)
    n = 100
    inter = rng.normal(0.8, 0.5, (n, 3))
    costs = rng.uniform(8000.0, 22000.0, n)
    sizes = rng.uniform(300.0, 2000.0, n)
    alphas = rng.uniform(0.05, 0.2, n)
    sigma = 0.9
    mu = rng.uniform(0.0, 6000.0, (n, 3))
    sol = solve_nash(sizes, costs, inter, alphas, sigma, mu)
    ok_foc = sol.converged and np.max(np.abs(sol.foc_residuals)) < 1e-8
    worst_gain = 0.0
    base = profit(sol.prices, sizes, costs, inter, alphas, sigma, mu)
    for i in range(3):
        grid = np.linspace(0.5, 1.5, 2001)[None, :] * sol.prices[:, i][:, None]
        trial = np.repeat(sol.prices[:, None, :], 2001, axis=1)
        trial[:, :, i] = grid
        pi = profit(trial, sizes[:, None], costs[:, None],
                    np.repeat(inter[:, None, :], 2001, axis=1),
                    alphas[:, None], sigma,
                    np.repeat(mu[:, None, :], 2001, axis=1))[:, :, i]
        gain = (pi.max(axis=1) - base[:, i]) / np.abs(base[:, i])
        worst_gain = max(worst_gain, float(gain.max()))
    elapsed = time.time() - t0
    report("2 nash certification",
           ok_foc and worst_gain < 1e-6 and elapsed < 60.0,
           f"max FOC {np.max(np.abs(sol.foc_residuals)):.2e}, "
           f"max deviation gain {worst_gain:.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. Cost / spillover round trips


def test_criterion_3_cost_and_spillover_round_trips():
    t0 = time.time()
    rng = np.random.default_rng(303)
    # cost round trip
    inter = rng.normal(0.9, 0.4, (40, 3))
    costs = rng.uniform(9000.0, 20000.0, 40)
    mu0 = rng.uniform(0.0, 5000.0, (40, 3))
    sol = solve_nash(1000.0, costs, inter, 0.1, 0.9, mu0)
    c_hat = recover_costs(sol.prices, inter, 0.1, 0.9, mu0)
    cost_ok = sol.converged and np.max(np.abs(c_hat - costs[:, None]) / costs[:, None]) < 1e-6

    # homogeneous bonus recovery at the published tier-0 value
    mu_star = 16105.5
    world = SynthConfig(seed=33, n_markets=40, n_weeks=12, period_break=6,
                        price_mode="nash_mu", cost_median=33000.0, xi_sd=0.0,
                        alpha_dispersion=0.0,
                        mu_tiers=np.full((3, 3), mu_star) * np.array([[1.0], [0.5], [0.01]]))
    panel, truth = generate_panel(world)
    drug_ids = sorted(panel.markets)
    inter40 = np.array([[panel.markets[d].delta_base[f] for f in ("CV", "FA", "SB")]
                        for d in drug_ids])
    costs40 = np.array([float(truth["base_cost"][d]) for d in drug_ids])
    sizes40 = np.array([panel.markets[d].market_size for d in drug_ids])
    obs0 = np.array([[panel.markets[d].tier_prices[f][0] for f in ("CV", "FA", "SB")]
                     for d in drug_ids])
    mu_hom = estimate_spillovers(obs0, sizes40, costs40, inter40, 0.1158, 0.9,
                                 mode="homogeneous")
    hom_ok = abs(mu_hom[0] - mu_star) / mu_star < 0.01

    het_star = np.array([25756.4, 16074.7, 15660.1])
    world2 = SynthConfig(seed=34, n_markets=40, n_weeks=12, period_break=6,
                         price_mode="nash_mu", cost_median=36000.0, xi_sd=0.0,
                         alpha_dispersion=0.0,
                         mu_tiers=np.stack([het_star, het_star * 0.5,
                                            het_star * 0.01]))
    panel2, truth2 = generate_panel(world2)
    drug_ids2 = sorted(panel2.markets)
    inter2 = np.array([[panel2.markets[d].delta_base[f] for f in ("CV", "FA", "SB")]
                       for d in drug_ids2])
    costs2 = np.array([float(truth2["base_cost"][d]) for d in drug_ids2])
    sizes2 = np.array([panel2.markets[d].market_size for d in drug_ids2])
    obs2 = np.array([[panel2.markets[d].tier_prices[f][0] for f in ("CV", "FA", "SB")]
                     for d in drug_ids2])
    mu_het = estimate_spillovers(obs2, sizes2, costs2, inter2, 0.1158, 0.9,
                                 mode="heterogeneous", starts=2)
    het_ok = np.max(np.abs(mu_het - het_star) / het_star) < 0.02
    elapsed = time.time() - t0
    report("3 cost/spillover round trips",
           cost_ok and hom_ok and het_ok and elapsed < 120.0,
           f"hom err {abs(mu_hom[0]-mu_star)/mu_star:.2%}, "
           f"het err {np.max(np.abs(mu_het-het_star)/het_star):.2%}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 4. GMM closure


@pytest.mark.slow
def test_criterion_4_gmm_closure():
    t0 = time.time()
    truth = np.array([0.12, 0.08, 0.85])
    cfg = SynthConfig(seed=44, n_markets=50, n_weeks=40, period_break=20,
                      xi_sd=0.0, alpha_dispersion=0.0,
                      demand=DemandParams(alpha_pre=0.12, alpha_post=0.08,
                                          sigma=0.85))
    panel, _ = generate_panel(cfg)
    res = estimate_gmm(panel, build_instruments(panel))
    noiseless_ok = np.max(np.abs(res.theta - truth)) < 1e-6

    # Monte Carlo at full scale
    errs = []
    for seed in range(50):
        cfgn = SynthConfig(seed=4000 + seed, n_markets=222, n_weeks=80,
                           period_break=40, xi_sd=0.05, alpha_dispersion=0.0,
                           demand=DemandParams(alpha_pre=0.12, alpha_post=0.08,
                                               sigma=0.85))
        pn, _ = generate_panel(cfgn)
        rn = estimate_gmm(pn, build_instruments(pn))
        errs.append(rn.theta - truth)
    errs = np.asarray(errs)
    mc_mean = errs.mean(axis=0)
    mc_se = errs.std(axis=0, ddof=1) / np.sqrt(len(errs))
    noisy_ok = np.all(np.abs(mc_mean) <= 2.0 * mc_se + 1e-12)

    cfg_paper = SynthConfig(seed=45, n_markets=222, n_weeks=80, period_break=40,
                            xi_sd=0.05)
    pp, _ = generate_panel(cfg_paper)
    rp = estimate_gmm(pp, build_instruments(pp))
    target = np.array([0.1158, 0.0825, 0.90])
    paper_ok = np.all(np.abs(rp.theta - target) / target < 0.10)
    elapsed = time.time() - t0
    report("4 gmm closure",
           noiseless_ok and noisy_ok and paper_ok and elapsed < 600.0,
           f"noiseless {np.max(np.abs(res.theta-truth)):.1e}; "
           f"mc |mean|/se {np.max(np.abs(mc_mean)/np.maximum(mc_se,1e-12)):.2f}; "
           f"paper {rp.theta.round(4)}; {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 5. Dynamic inner loop


def test_criterion_5_dynamic_inner_loop(game_world):
    t0 = time.time()
    panel, trust = game_world
    params = DynamicParams(kappa=np.array([1657.8e3, 2376.78e3, 1133.71e3]),
                           mu=np.array([2.81, 0.0, 0.0]), lambda0=-2.0,
                           lambda1=0.5, psi_bar=0.2)
    game = CoordinationGame(panel.markets, DemandParams(), params, trust)
    tables = game.solve(tol=1e-6)
    bellman_ok = tables.final_delta < 1e-6

    params0 = DynamicParams(kappa=params.kappa, mu=params.mu, lambda0=-2.0,
                            lambda1=0.5, psi_bar=0.0)
    g0 = CoordinationGame(panel.markets, DemandParams(), params0, trust)
    tb0 = g0.solve(tol=1e-10)
    pi_all, _, _ = g0.flow_profit_arrays()
    target = pi_all[..., None] / (1.0 - 0.95)
    geo_rel = float(np.max(np.abs(tb0.V - target) / np.maximum(np.abs(target), 1e-12)))

    # 24-cell toy game vs loop-based linear policy evaluation
    from tests.test_dynamic import _policy_evaluation_linear_solve
    trust2 = build_trust_transition(np.zeros((2, 2)), laplace_lambda=0.5,
                                    grid=np.array([0.0, 1.0]))
    markets2 = {}
    for d, m in list(panel.markets.items())[:2]:
        markets2[d] = type(m)(drug_id=m.drug_id, market_size=m.market_size,
                              tier_prices={f: m.tier_prices[f][:2].copy()
                                           for f in ("CV", "FA", "SB")},
                              cost_path=m.cost_path, max_tier=1,
                              chronic=m.chronic, refill_days=m.refill_days,
                              molecule=m.molecule, delta_base=m.delta_base,
                              alpha_scale=m.alpha_scale)
    toy = CoordinationGame(markets2, DemandParams(), params, trust2)
    tb_toy = toy.solve(tol=1e-10)
    v_lin = _policy_evaluation_linear_solve(toy, tb_toy)
    toy_err = float(np.max(np.abs(v_lin - tb_toy.V)))
    elapsed = time.time() - t0
    report("5 dynamic inner loop",
           bellman_ok and geo_rel < 1e-8 and toy_err < 1e-8 and elapsed < 60.0,
           f"delta {tables.final_delta:.1e}, geometric {geo_rel:.1e}, "
           f"toy {toy_err:.1e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 6. NFXP closure


@pytest.mark.slow
def test_criterion_6_nfxp_closure(game_world):
    t0 = time.time()
    panel, trust = game_world
    temp = 300.0
    kappa_true = np.array([1600e3, 2400e3, 1150e3])
    true = DynamicParams(kappa=kappa_true, mu=np.zeros(3), lambda0=-2.0,
                         lambda1=0.5, psi_bar=0.2)
    wins = 0
    x_hat_main = None
    trust_used = None
    events_main = None
    for seed in range(20):
        events, _ = generate_events(panel.markets, DemandParams(), true, trust,
                                    horizon=50, seed=7000 + seed,
                                    temperature=temp)
        cfg = FitConfig(seed=0, n_starts=2, mu_bounds=(0.0, 5.0))
        res, x_hat, tm = fit(events, panel.markets, DemandParams(), cfg,
                             trust_model=trust, n_weeks=50, temperature=temp)
        if res.kappa[2] == res.kappa.min():
            wins += 1
        if seed == 0:
            x_hat_main, trust_used, events_main = x_hat, tm, events
    ordering_ok = wins >= 18

    cfg = FitConfig(seed=0, n_starts=1, mu_bounds=(0.0, 5.0))
    summary = bootstrap(events_main, panel.markets, DemandParams(), cfg,
                        n_draws=20, seed=60, n_weeks=50,
                        trust_model=trust_used, x_hat=x_hat_main)
    names = ["kappa_CV", "kappa_FA", "kappa_SB", "lambda0", "lambda1"]
    truths = dict(kappa_CV=1600e3, kappa_FA=2400e3, kappa_SB=1150e3,
                  lambda0=-2.0, lambda1=0.5,
                  mu_CV=0.0, mu_FA=0.0, mu_SB=0.0)
    band_ok = all(summary[k]["p10"] - 1e-9 <= truths[k] <= summary[k]["p90"] + 1e-9
                  for k in names)

    res_mpe, _, _ = fit(events_main, panel.markets, DemandParams(),
                        FitConfig(seed=0, n_starts=1, mu_bounds=(0.0, 5.0)),
                        variant="standard_mpe", trust_model=trust_used,
                        n_weeks=50, temperature=temp)
    mpe_ok = all(v == 1.0 for v in res_mpe.tau_report.values())
    elapsed = time.time() - t0
    report("6 nfxp closure",
           ordering_ok and band_ok and mpe_ok and elapsed < 1800.0,
           f"ordering {wins}/20, bands {'ok' if band_ok else 'miss'}, "
           f"mpe tau {res_mpe.tau_report['0']}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 7 + 8. Counterfactuals and welfare identities


@pytest.fixture(scope="module")
def welfare_world():
    cfg = SynthConfig(seed=11, n_markets=222, n_weeks=104, period_break=52)
    panel, _ = generate_panel(cfg)
    trust = build_trust_transition(np.zeros((10, 10)), laplace_lambda=0.5,
                                   grid=np.linspace(0.0, 3 * 222, 10))
    spill = SpilloverParams(mu=DEFAULT_MU_TIERS)
    dyn = DynamicParams(kappa=np.array([1657.8e3, 2376.78e3, 1133.71e3]),
                        mu=np.array([2.81, 0.0, 0.0]), lambda0=-2.0,
                        lambda1=0.5, psi_bar=0.2)
    reports = {}
    for label in ("post_ban", "pre_ban_elasticity", "pre_ban_T1", "pre_ban_T0"):
        reports[label] = run_scenario(label, panel.markets, DemandParams(),
                                      spill, dyn, trust, horizon=20, seed=3,
                                      n_paths=8)
    return reports


@pytest.mark.slow
def test_criterion_7_counterfactual_bands(welfare_world):
    t0 = time.time()
    rep = welfare_world
    pb, pe = rep["post_ban"], rep["pre_ban_elasticity"]
    t0r = rep["pre_ban_T0"]
    gap = (pe.mean_price - t0r.mean_price) / pe.mean_price
    direction_ok = t0r.mean_price < pe.mean_price
    gap_ok = 0.05 <= gap <= 0.16
    elast_diff = abs(pe.cumulative_cs - pb.cumulative_cs) / abs(pb.cumulative_cs)
    elast_ok = elast_diff <= 0.05
    red = 1.0 - abs(t0r.cumulative_cs) / abs(pb.cumulative_cs)
    red_ok = 0.30 <= red <= 0.42
    elapsed = time.time() - t0
    report("7 counterfactual bands",
           direction_ok and gap_ok and elast_ok and red_ok,
           f"gap {gap:.1%} (5-16%), elast diff {elast_diff:.1%} (<=5%), "
           f"T0 reduction {red:.1%} (30-42%)")


@pytest.mark.slow
def test_criterion_8_welfare_identities(welfare_world):
    rep = welfare_world["post_ban"]
    w = rep.weekly
    ident = np.max(np.abs(w["dwl_m"] - (np.abs(w["d_cs_m"]) - w["d_ps_m"])))
    share = rep.cumulative_dwl / abs(rep.cumulative_cs)
    report("8 welfare identities",
           ident < 1e-9 and 0.18 <= share <= 0.30,
           f"identity {ident:.1e}, DWL share {share:.1%} (18-30%)")


# --------------------------------------------------------------------------
# 9. Cox estimator


def test_criterion_9_cox(small_panel):
    t0 = time.time()
    coefs = []
    score_ok = True
    for seed in range(20):
        rng = np.random.default_rng(900 + seed)
        x = rng.binomial(1, 0.5, size=(500, 1)).astype(float)
        rate = 0.05 * np.exp(0.8 * x[:, 0])
        t = rng.exponential(1.0 / rate)
        fit_res = cox_fit(t, np.ones(500, dtype=int), x)
        coefs.append(fit_res.coef[0])
        score_ok &= fit_res.score_norm < 1e-6
    recover_ok = abs(np.median(coefs) - 0.8) <= 0.1

    panel, truth = small_panel
    events = pd.DataFrame([{"drug_id": d, "week": int(wk), "success": 1}
                           for d, wk in truth["tier1_week"].items()])
    spec1, _ = coordination_hazard_table(panel, events, 1)
    c = dict(zip(spec1.names, spec1.coef))
    sign_ok = c["ln_size"] > 0 and c["ln_size:ln_t"] < 0
    elapsed = time.time() - t0
    report("9 cox estimator",
           recover_ok and score_ok and sign_ok and elapsed < 120.0,
           f"median beta {np.median(coefs):.3f}, size {c['ln_size']:.2f}, "
           f"interaction {c['ln_size:ln_t']:.2f}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 10. Event classifier


def test_criterion_10_event_classifier():
    import itertools
    from tests.test_events import FIRMS, build_fixture

    t0 = time.time()
    all_ok = True
    for klass, leader in itertools.product(
            ("successful", "no_response", "partial_follow", "transient_reversal"),
            FIRMS):
        ev = classify_events(build_fixture(klass, leader))
        all_ok &= len(ev) == 1 and ev[0].classification == klass \
            and ev[0].leader == leader

    series = {
        "A": np.concatenate([np.full(5, 100.0), np.full(25, 230.0)]),
        "B": np.concatenate([np.full(7, 100.0), np.full(23, 228.0)]),
        "C": np.concatenate([np.full(9, 100.0), np.full(21, 232.0)]),
    }
    ev = classify_events(series, align_window=7, persist_horizon=10)
    marvelon_ok = len(ev) == 1 and ev[0].classification == SUCCESSFUL \
        and ev[0].leader == "A"
    elapsed = time.time() - t0
    report("10 event classifier", all_ok and marvelon_ok and elapsed < 5.0,
           f"12-cell grid + leader-A pattern, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 11. Pipeline determinism


@pytest.mark.slow
def test_criterion_11_pipeline_determinism(tmp_path):
    t0 = time.time()
    synth_cfg = tmp_path / "synth.json"
    synth_cfg.write_text(json.dumps({
        "n_markets": 20, "n_weeks": 40, "period_break": 20, "xi_sd": 0.03,
    }))
    outs = []
    for run in ("first", "second"):
        out = tmp_path / run
        code = cli_main(["--seed", "17", "pipeline", "--out-dir", str(out),
                         "--synth-config", str(synth_cfg), "--horizon", "16",
                         "--starts", "1", "--paths", "2"])
        assert code == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    identical = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
                    for n in names)
    elapsed = time.time() - t0
    report("11 pipeline determinism",
           identical and len(names) >= 6 and elapsed < 2700.0,
           f"{len(names)} csv outputs byte-identical, {elapsed:.0f}s")
