"""Coordination-event classification from aligned price series.

An event starts when some firm (the leader) raises its price by at least
``min_increase``; other firms' raises inside the alignment window W join the
event.  Classes:

* successful        - every firm moved within W, nobody reversed within H
* no_response       - only the leader moved
* partial_follow    - some but not all followers moved, no reversal
* transient_reversal- any participant fell back below the midpoint of its own
                      pre/post levels within H periods of its move

Reversal takes precedence over the count-based classes.  Candidate leader
moves closer than W periods apart merge into one event anchored at the
earliest move (flagged).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

SUCCESSFUL = "successful"
NO_RESPONSE = "no_response"
PARTIAL = "partial_follow"
REVERSAL = "transient_reversal"
CLASSES = (SUCCESSFUL, NO_RESPONSE, PARTIAL, REVERSAL)


@dataclass
class CoordinationEvent:
    drug_id: str
    time: int                    # period index of the leader's move
    leader: str
    followers: tuple             # firms that joined within W (excl. leader)
    classification: str
    tier_from: float             # leader's pre-move price level L0
    tier_to: float               # leader's post-move price level L1
    merged: bool = False         # True when overlapping candidates collapsed
    moves: dict = field(default_factory=dict)   # firm -> (t, pre, post)


def _upward_moves(series, min_increase):
    """(t, pre, post) tuples where price rises by at least min_increase."""
    p = np.asarray(series, dtype=float)
    out = []
    for t in range(1, len(p)):
        if p[t] >= p[t - 1] * (1.0 + min_increase) and p[t - 1] > 0:
            out.append((t, p[t - 1], p[t]))
    return out


def _reversed_within(series, t_move, pre, post, horizon):
    """Price falls below the pre/post midpoint within `horizon` of the move."""
    p = np.asarray(series, dtype=float)
    mid = (pre + post) / 2.0
    upper = min(len(p), t_move + horizon + 1)
    return bool(np.any(p[t_move + 1:upper] < mid))


def classify_events(prices, align_window=7, persist_horizon=10,
                    min_increase=0.15, drug_id="unknown"):
    """Partition one drug's firm-by-period price paths into events.

    ``prices`` maps firm -> price series (aligned, daily or weekly index).
    Returns CoordinationEvent list ordered by event time; deterministic and
    invariant to firm relabeling up to the leader's name.
    """
    firms = sorted(prices.keys())
    series = {f: np.asarray(prices[f], dtype=float) for f in firms}
    moves = {f: _upward_moves(series[f], min_increase) for f in firms}

    # candidate anchors = earliest unclaimed move across firms
    all_moves = sorted(
        (t, f, pre, post) for f in firms for (t, pre, post) in moves[f]
    )
    events = []
    used = {f: set() for f in firms}
    i = 0
    while i < len(all_moves):
        t0, leader, pre0, post0 = all_moves[i]
        if t0 in used[leader]:
            i += 1
            continue
        # merge any later leader-candidate of the same firm inside W
        merged = False
        participants = {leader: (t0, pre0, post0)}
        used[leader].add(t0)
        for t, f, pre, post in all_moves[i + 1:]:
            if t - t0 > align_window:
                break
            if f in participants:
                merged = True        # overlapping candidate, absorbed
                used[f].add(t)
                continue
            participants[f] = (t, pre, post)
            used[f].add(t)
        followers = tuple(sorted(f for f in participants if f != leader))
        any_reversal = any(
            _reversed_within(series[f], t, pre, post, persist_horizon)
            for f, (t, pre, post) in participants.items()
        )
        if any_reversal:
            label = REVERSAL
        elif len(participants) == len(firms):
            label = SUCCESSFUL
        elif len(participants) == 1:
            label = NO_RESPONSE
        else:
            label = PARTIAL
        events.append(CoordinationEvent(
            drug_id=drug_id, time=t0, leader=leader, followers=followers,
            classification=label, tier_from=pre0, tier_to=post0, merged=merged,
            moves=dict(participants),
        ))
        i += 1
    return events


def classify_panel_events(panel, align_window=7, persist_horizon=10,
                          min_increase=0.15):
    """Run the classifier per drug over a weekly Panel; returns a DataFrame."""
    rows = []
    wide = panel.frame.pivot_table(index=["drug_id", "week"], columns="firm",
                                   values="price_clp")
    for drug_id, g in wide.groupby(level="drug_id"):
        g = g.droplevel(0).sort_index()
        series = {f: g[f].to_numpy() for f in g.columns if not g[f].isna().any()}
        if len(series) < 2:
            continue
        for ev in classify_events(series, align_window, persist_horizon,
                                  min_increase, drug_id=str(drug_id)):
            rows.append({
                "drug_id": ev.drug_id,
                "week": ev.time,
                "leader": ev.leader,
                "classification": ev.classification,
                "n_followers": len(ev.followers),
                "tier_from": ev.tier_from,
                "tier_to": ev.tier_to,
                "merged": ev.merged,
            })
    return pd.DataFrame(rows, columns=["drug_id", "week", "leader", "classification",
                                       "n_followers", "tier_from", "tier_to", "merged"])
