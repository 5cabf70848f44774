import itertools

import numpy as np
import pandas as pd
import pytest

from lossleader.events import (NO_RESPONSE, PARTIAL, REVERSAL, SUCCESSFUL,
                               classify_events, classify_panel_events)

FIRMS = ("A", "B", "C")


def flat(level, n=30):
    return np.full(n, float(level))


def with_jump(base, t, new_level, n=30):
    p = flat(base, n)
    p[t:] = new_level
    return p


def with_jump_and_reversal(base, t_up, new_level, t_down, n=30):
    p = with_jump(base, t_up, new_level, n)
    p[t_down:] = base  # falls back below the midpoint
    return p


def build_fixture(klass, leader, base=100.0, n=30):
    """One price-path dict per (class, leader) cell."""
    others = [f for f in FIRMS if f != leader]
    lead_t = 5
    series = {leader: with_jump(base, lead_t, base * 2.3, n)}
    if klass == SUCCESSFUL:
        series[others[0]] = with_jump(base, lead_t + 2, base * 2.25, n)
        series[others[1]] = with_jump(base, lead_t + 4, base * 2.35, n)
    elif klass == NO_RESPONSE:
        series[others[0]] = flat(base, n)
        series[others[1]] = flat(base, n)
    elif klass == PARTIAL:
        series[others[0]] = with_jump(base, lead_t + 3, base * 2.2, n)
        series[others[1]] = flat(base, n)
    elif klass == REVERSAL:
        series[others[0]] = with_jump_and_reversal(base, lead_t + 2, base * 2.2,
                                                   lead_t + 2 + 6, n)
        series[others[1]] = flat(base, n)
    return series


class TestClassification:
    @pytest.mark.parametrize("klass,leader", list(itertools.product(
        (SUCCESSFUL, NO_RESPONSE, PARTIAL, REVERSAL), FIRMS)))
    def test_twelve_fixture_grid(self, klass, leader):
        events = classify_events(build_fixture(klass, leader))
        assert len(events) == 1
        assert events[0].classification == klass
        assert events[0].leader == leader

    def test_contraceptive_pattern_successful_leader_a(self):
        # +130% on day 0 (well, day 5), followers at +2 and +4 days, no reversal
        series = {
            "A": with_jump(100.0, 5, 230.0),
            "B": with_jump(100.0, 7, 228.0),
            "C": with_jump(100.0, 9, 232.0),
        }
        events = classify_events(series, align_window=7, persist_horizon=10)
        assert len(events) == 1
        assert events[0].classification == SUCCESSFUL
        assert events[0].leader == "A"
        assert set(events[0].followers) == {"B", "C"}
        assert events[0].tier_to > events[0].tier_from

    def test_partial_with_reversal_classified_as_reversal(self):
        # leader plus one follower, follower reverses on day 8: the reversal
        # rule wins the tie against partial_follow
        series = build_fixture(REVERSAL, "A")
        events = classify_events(series)
        assert events[0].classification == REVERSAL

    def test_small_fluctuations_ignored(self):
        series = {f: flat(100.0) * (1 + 0.01 * i) for i, f in enumerate(FIRMS)}
        assert classify_events(series) == []

    def test_below_threshold_moves_ignored(self):
        series = {
            "A": with_jump(100.0, 5, 110.0),  # +10% < 15% threshold
            "B": flat(100.0),
            "C": flat(100.0),
        }
        assert classify_events(series, min_increase=0.15) == []

    def test_overlapping_candidates_merge_flagged(self):
        p = flat(100.0)
        p[5:] = 130.0
        p[8:] = 170.0  # second qualifying move inside the window
        series = {"A": p, "B": flat(100.0), "C": flat(100.0)}
        events = classify_events(series)
        assert len(events) == 1
        assert events[0].merged

    def test_two_separate_episodes(self):
        series = {
            "A": with_jump(100.0, 3, 130.0),
            "B": with_jump(100.0, 4, 131.0),
            "C": with_jump(100.0, 5, 129.0),
        }
        for f in FIRMS:
            series[f] = np.concatenate([series[f], series[f] * 1.4])
        events = classify_events(series)
        assert len(events) == 2
        assert all(e.classification == SUCCESSFUL for e in events)

    def test_permutation_invariance(self):
        base = build_fixture(SUCCESSFUL, "A")
        relabel = {"A": "C", "B": "A", "C": "B"}
        swapped = {relabel[f]: s for f, s in base.items()}
        ev1 = classify_events(base)[0]
        ev2 = classify_events(swapped)[0]
        assert ev2.classification == ev1.classification
        assert ev2.leader == relabel[ev1.leader]
        assert ev2.time == ev1.time

    def test_idempotent(self):
        series = build_fixture(PARTIAL, "B")
        first = classify_events(series)
        second = classify_events(series)
        assert [(e.time, e.leader, e.classification) for e in first] == \
            [(e.time, e.leader, e.classification) for e in second]


def test_classify_panel_events_finds_tier_moves(small_panel):
    panel, _ = small_panel
    frame = classify_panel_events(panel, align_window=2, persist_horizon=3)
    assert len(frame) > 0
    assert (frame["classification"] == SUCCESSFUL).mean() > 0.5
    assert set(frame.columns) >= {"drug_id", "week", "leader", "classification"}
