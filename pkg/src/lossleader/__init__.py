"""Structural toolkit for loss-leader pricing, demand spillovers, and
sequential price coordination in retail oligopoly."""

__version__ = "0.1.0"

from .data import (DEFAULT_FIRMS, Market, Panel, PanelObservation, RunConfig,
                   load_panel, market_size_rule, save_panel)
from .demand import (DemandParams, ShareResult, compute_shares, cross_elasticity,
                     invert_shares, own_elasticity, trim_utilities)
from .dynamic import (CoordinationGame, DynamicParams, TrustModel,
                      build_trust_transition, tau)
from .equilibrium import (NashSolution, SpilloverParams, estimate_spillovers,
                          profit, recover_costs, solve_nash)
from .gmm import (GmmResult, InstrumentSet, RuptureConfig, build_instruments,
                  estimate_gmm, first_stage_f, moment_conditions)
from .nfxp import FitConfig, FitResult, PenaltyConfig, bootstrap, fit, log_likelihood
from .synth import SynthConfig, generate_events, generate_panel
from .welfare import Scenario, WelfareReport, consumer_surplus, producer_surplus, run_scenario
