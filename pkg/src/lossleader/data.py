"""Canonical data model, unit conventions, and file IO.

Units convention used across the package:

* Money is Chilean pesos (CLP) stored as float64.  USD conversion is for
  display only, at ``clp_per_usd`` (default 527).
* Prices enter utility indices in thousands of CLP (``UTILITY_PRICE_SCALE``),
  so a price coefficient of 0.1 means 0.1 utils per 1,000 CLP.  Margins,
  profits and welfare are always plain CLP.
* The canonical panel frequency is weekly.  Market size accepts daily peaks
  (scaled by 7) or weekly peaks directly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

#: Firms in the empirical application, ordered.
DEFAULT_FIRMS = ("CV", "FA", "SB")

#: Divisor applied to CLP prices before they enter any utility index.
UTILITY_PRICE_SCALE = 1000.0

#: Exact column order of panel.csv.
PANEL_COLUMNS = [
    "week",
    "drug_id",
    "firm",
    "price_clp",
    "quantity",
    "wholesale_cost_clp",
    "chronic",
    "refill_days",
    "molecule",
    "prescription",
]


class PanelSchemaError(ValueError):
    """Raised when a panel file violates the schema or an invariant."""


@dataclass(frozen=True)
class PanelObservation:
    """One (drug, firm, week) record."""

    week: int
    drug_id: str
    firm: str
    price: float            # CLP per unit, > 0
    quantity: float         # units, >= 0
    wholesale_cost: float   # CLP per unit, > 0
    chronic: bool
    refill_days: int
    molecule: str
    prescription: bool


@dataclass
class Market:
    """Per-drug market primitives consumed by the pricing and game modules.

    ``tier_prices`` maps firm -> array of CLP prices indexed by tier, strictly
    increasing.  ``delta_base`` maps firm -> mean-utility intercept excluding
    the price term (so delta = delta_base - alpha * p / 1000).
    """

    drug_id: str
    market_size: float
    tier_prices: dict = field(default_factory=dict)
    cost_path: np.ndarray = field(default_factory=lambda: np.array([]))
    max_tier: int = 1
    chronic: bool = True
    refill_days: int = 30
    molecule: str = "unknown"
    delta_base: dict = field(default_factory=dict)
    alpha_scale: float = 1.0   # per-drug multiplier on the price coefficients

    @property
    def cost(self):
        """Representative marginal cost: median of the wholesale path."""
        return float(np.median(self.cost_path))

    def tier_price_vector(self, firms, tier):
        return np.array([self.tier_prices[f][tier] for f in firms], dtype=float)

    def validate(self, firms=None):
        if self.market_size <= 0:
            raise PanelSchemaError(f"{self.drug_id}: market size must be positive")
        if self.max_tier < 1:
            raise PanelSchemaError(f"{self.drug_id}: max_tier must be >= 1")
        for f, ladder in self.tier_prices.items():
            ladder = np.asarray(ladder, dtype=float)
            if np.any(np.diff(ladder) <= 0):
                raise PanelSchemaError(
                    f"{self.drug_id}/{f}: tier prices must be strictly increasing"
                )


@dataclass
class Panel:
    """Validated weekly panel plus derived market objects.

    Immutable by convention after construction; all downstream modules only
    read from it.
    """

    frame: pd.DataFrame
    markets: dict
    period_break: int
    firms: tuple = DEFAULT_FIRMS

    @property
    def n_weeks(self):
        return int(self.frame["week"].max()) + 1

    @property
    def drug_ids(self):
        return list(self.markets.keys())

    def observations(self):
        """Iterate typed rows (mostly for validation and small fixtures)."""
        for row in self.frame.itertuples(index=False):
            yield PanelObservation(
                week=int(row.week), drug_id=str(row.drug_id), firm=str(row.firm),
                price=float(row.price_clp), quantity=float(row.quantity),
                wholesale_cost=float(row.wholesale_cost_clp),
                chronic=bool(row.chronic), refill_days=int(row.refill_days),
                molecule=str(row.molecule), prescription=bool(row.prescription),
            )


@dataclass
class RunConfig:
    """Keys of config.json with package defaults."""

    delta: float = 0.95
    psi_bar: float = 0.2
    sigma_bound: float = 0.9
    alpha_min: float = 0.01
    trim_quantiles: tuple = (0.2, 0.8)
    trust_states_K: int = 10
    laplace_lambda: float = 0.5
    align_window_W: int = 7
    persist_horizon_H: int = 10
    inner_tol: float = 1e-6
    outer_tol: float = 1e-4
    max_outer_iter: int = 100
    clp_per_usd: float = 527.0

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise PanelSchemaError(f"unknown config keys: {sorted(unknown)}")
        if "trim_quantiles" in raw:
            raw["trim_quantiles"] = tuple(raw["trim_quantiles"])
        return cls(**raw)

    def save(self, path):
        out = dataclasses.asdict(self)
        out["trim_quantiles"] = list(out["trim_quantiles"])
        with open(path, "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")


def market_size_rule(quantities, frequency="weekly"):
    """Market size from peak observed quantity.

    ``frequency="daily"`` applies the peak-daily rule N = 7 * max(q); the
    weekly convention takes the peak weekly quantity directly.
    """
    q = np.asarray(quantities, dtype=float)
    if q.size == 0 or not np.any(q > 0):
        raise ValueError("market has no sales")
    if frequency == "daily":
        return 7.0 * float(np.max(q))
    if frequency == "weekly":
        return float(np.max(q))
    raise ValueError(f"frequency must be 'daily' or 'weekly', got {frequency!r}")


def _coerce_bool(col, name):
    if col.dtype == bool:
        return col
    mapping = {"true": True, "false": False, "1": True, "0": False}
    out = col.astype(str).str.strip().str.lower().map(mapping)
    if out.isna().any():
        bad = int(np.where(out.isna())[0][0])
        raise PanelSchemaError(f"column {name!r}: non-boolean value at row {bad}")
    return out.astype(bool)


def validate_frame(frame):
    """Check schema and row-level invariants; return a clean typed copy."""
    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise PanelSchemaError(f"missing columns: {missing}")
    df = frame[PANEL_COLUMNS].copy()
    df["week"] = df["week"].astype(int)
    df["drug_id"] = df["drug_id"].astype(str)
    df["firm"] = df["firm"].astype(str)
    for col in ("price_clp", "quantity", "wholesale_cost_clp"):
        df[col] = pd.to_numeric(df[col], errors="raise").astype(float)
    df["chronic"] = _coerce_bool(df["chronic"], "chronic")
    df["prescription"] = _coerce_bool(df["prescription"], "prescription")
    df["refill_days"] = df["refill_days"].astype(int)
    df["molecule"] = df["molecule"].astype(str)

    bad = df.index[df["price_clp"] <= 0]
    if len(bad):
        raise PanelSchemaError(f"non-positive price at row {int(bad[0])}")
    bad = df.index[df["wholesale_cost_clp"] <= 0]
    if len(bad):
        raise PanelSchemaError(f"non-positive wholesale cost at row {int(bad[0])}")
    bad = df.index[df["quantity"] < 0]
    if len(bad):
        raise PanelSchemaError(f"negative quantity at row {int(bad[0])}")
    if (df["refill_days"] < 7).any() or (df["refill_days"] > 90).any():
        bad = df.index[(df["refill_days"] < 7) | (df["refill_days"] > 90)][0]
        raise PanelSchemaError(f"refill_days outside [7, 90] at row {int(bad)}")

    dup = df.duplicated(subset=["week", "drug_id", "firm"])
    if dup.any():
        key = df.loc[dup.idxmax(), ["week", "drug_id", "firm"]].tolist()
        raise PanelSchemaError(f"duplicate (week, drug_id, firm) key: {key}")
    return df


def markets_from_frame(frame, n_tiers=3, size_frequency="weekly"):
    """Derive Market objects from panel rows.

    Market size follows the peak-quantity rule; tier prices are per-tier firm
    medians obtained by splitting each firm's price path into ``n_tiers``
    ascending levels (quantile breakpoints on the pooled price path).  When a
    firm's path has fewer distinct levels the ladder is padded multiplicatively
    so tiers stay strictly increasing.
    """
    markets = {}
    for drug_id, g in frame.groupby("drug_id", sort=True):
        weekly_q = g.groupby("week")["quantity"].sum()
        n_j = market_size_rule(weekly_q.to_numpy(), frequency=size_frequency)
        tier_prices = {}
        for firm, gf in g.groupby("firm", sort=True):
            p = np.sort(gf["price_clp"].to_numpy())
            qs = np.quantile(p, np.linspace(0.0, 1.0, n_tiers + 1))
            ladder = np.array(
                [p[(p >= qs[k]) & (p <= qs[k + 1])].mean() for k in range(n_tiers)]
            )
            for k in range(1, n_tiers):  # enforce strict increase
                if ladder[k] <= ladder[k - 1]:
                    ladder[k] = ladder[k - 1] * 1.001
            tier_prices[firm] = ladder
        markets[str(drug_id)] = Market(
            drug_id=str(drug_id),
            market_size=n_j,
            tier_prices=tier_prices,
            cost_path=g.groupby("week")["wholesale_cost_clp"].mean().to_numpy(),
            max_tier=n_tiers - 1,
            chronic=bool(g["chronic"].iloc[0]),
            refill_days=int(g["refill_days"].iloc[0]),
            molecule=str(g["molecule"].iloc[0]),
        )
    return markets


def build_panel(frame, period_break, firms=DEFAULT_FIRMS, markets=None,
                size_frequency="weekly"):
    """Validate a raw frame and assemble a Panel."""
    df = validate_frame(frame)
    df = df.sort_values(["drug_id", "firm", "week"], kind="mergesort").reset_index(drop=True)
    weeks = df["week"]
    # period_break == max+1 is the all-pre degenerate case single-week
    # fixtures need; anything else must split the range
    if not (weeks.min() < period_break <= weeks.max() + 1):
        raise PanelSchemaError(
            f"period_break {period_break} not inside weeks "
            f"[{weeks.min()}, {weeks.max()}]"
        )
    unknown = set(df["firm"]) - set(firms)
    if unknown:
        raise PanelSchemaError(f"unknown firms in panel: {sorted(unknown)}")
    if markets is None:
        markets = markets_from_frame(df, size_frequency=size_frequency)
    missing = set(df["drug_id"]) - set(markets)
    if missing:
        raise PanelSchemaError(f"observations without market: {sorted(missing)[:5]}")
    return Panel(frame=df, markets=markets, period_break=int(period_break), firms=tuple(firms))


def load_panel(path, format="csv", period_break=None, firms=DEFAULT_FIRMS,
               markets=None):
    """Load and validate a panel file.

    ``period_break`` defaults to the midpoint week when not given; pipeline
    callers always pass it explicitly from config.
    """
    if format == "csv":
        frame = pd.read_csv(path)
    elif format == "json":
        with open(path) as fh:
            frame = pd.DataFrame(json.load(fh))
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    if period_break is None:
        wk = frame["week"].astype(int)
        period_break = int((wk.min() + wk.max() + 1) // 2)
    return build_panel(frame, period_break, firms=firms, markets=markets)


def save_panel(panel, path):
    """Write the canonical CSV (column order, %.10g floats, sorted rows)."""
    df = panel.frame.sort_values(["drug_id", "firm", "week"], kind="mergesort")
    out = df[PANEL_COLUMNS].copy()
    for col in ("chronic", "prescription"):
        out[col] = out[col].map({True: "true", False: "false"})
    out.to_csv(path, index=False, float_format="%.10g")


def clp_to_usd(value_clp, clp_per_usd=527.0):
    """Display-only currency conversion."""
    return np.asarray(value_clp, dtype=float) / clp_per_usd
