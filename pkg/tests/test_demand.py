from decimal import Decimal, getcontext

import numpy as np
import pytest

from lossleader.demand import (DemandParams, compute_shares, cross_elasticity,
                               cross_elasticity_matrix, delta_from_prices,
                               invert_shares, own_elasticity,
                               reported_closed_form_elasticities, trim_utilities)

FIXTURE_DELTA = np.array([1.0, 0.5, -0.2])
FIXTURE_SIGMA = 0.9


def decimal_shares(delta, sigma, prec=50):
    """Direct high-precision evaluation of the share formula."""
    getcontext().prec = prec
    d = [Decimal(str(x)) / (1 - Decimal(str(sigma))) for x in delta]
    e = [x.exp() for x in d]
    total = sum(e)
    cond = [x / total for x in e]
    iv = (1 - Decimal(str(sigma))) * total.ln()
    group = iv.exp() / (1 + iv.exp())
    return ([float(c * group) for c in cond], [float(c) for c in cond],
            float(iv), float(1 - group))


class TestShares:
    def test_high_precision_oracle(self):
        shares, cond, iv, outside = decimal_shares(FIXTURE_DELTA, FIXTURE_SIGMA)
        res = compute_shares(FIXTURE_DELTA, FIXTURE_SIGMA)
        np.testing.assert_allclose(res.shares, shares, rtol=1e-14)
        np.testing.assert_allclose(res.conditional, cond, rtol=1e-14)
        assert abs(res.inclusive_value - iv) < 1e-14
        assert abs(res.outside - outside) < 1e-14

    def test_single_firm_identity_case(self):
        res = compute_shares(np.array([0.0]), 0.37)
        assert res.inclusive_value == pytest.approx(0.0, abs=1e-15)
        assert res.shares[0] == pytest.approx(0.5, abs=1e-15)
        assert res.conditional[0] == 1.0

    def test_three_equal_deltas_split_evenly(self):
        res = compute_shares(np.array([0.3, 0.3, 0.3]), 0.6)
        np.testing.assert_allclose(res.conditional, 1.0 / 3.0, rtol=1e-15)

    def test_shares_sum_to_one(self, rng):
        delta = rng.normal(0, 2, size=(1000, 3))
        res = compute_shares(delta, 0.9)
        total = res.shares.sum(axis=1) + res.outside
        assert np.max(np.abs(total - 1.0)) < 1e-12

    def test_label_permutation_invariance(self, rng):
        delta = rng.normal(0, 1, 3)
        perm = np.array([2, 0, 1])
        a = compute_shares(delta, 0.8).shares
        b = compute_shares(delta[perm], 0.8).shares
        np.testing.assert_allclose(a[perm], b, rtol=1e-14)

    def test_sigma_domain_error(self):
        with pytest.raises(ValueError):
            compute_shares(np.zeros(2), 1.0)
        with pytest.raises(ValueError):
            compute_shares(np.zeros(2), 0.0)

    def test_extreme_deltas_stable(self):
        res = compute_shares(np.array([500.0, -500.0, 0.0]), 0.9)
        assert np.all(np.isfinite(res.shares))
        assert res.shares.sum() + res.outside == pytest.approx(1.0, abs=1e-12)


class TestInversion:
    def test_round_trip_fixture(self):
        res = compute_shares(FIXTURE_DELTA, FIXTURE_SIGMA)
        delta = invert_shares(res.shares, res.conditional, res.outside,
                              FIXTURE_SIGMA)
        np.testing.assert_allclose(delta, FIXTURE_DELTA, atol=1e-10)

    def test_round_trip_randomized(self, rng):
        delta = rng.normal(0, 1.5, size=(1000, 3))
        for sigma in (0.3, 0.85):
            res = compute_shares(delta, sigma)
            back = invert_shares(res.shares, res.conditional, res.outside, sigma)
            assert np.max(np.abs(back - delta)) < 1e-10

    def test_even_split_gives_zero(self):
        # one firm with s = s0 = 0.5: delta = ln(.5) - ln(.5) - sigma*ln(1) = 0
        delta = invert_shares(np.array([0.5]), np.array([1.0]), np.array(0.5), 0.44)
        assert delta[0] == pytest.approx(0.0, abs=1e-15)

    def test_zero_share_rejected(self):
        with pytest.raises(ValueError, match="interior"):
            invert_shares(np.array([0.0, 0.5]), np.array([0.5, 0.5]),
                          np.array(0.5), 0.5)


class TestTrimming:
    def test_one_to_ten_clips_to_quantiles(self):
        out, warned = trim_utilities(np.arange(1.0, 11.0))
        assert not warned
        assert out.min() == pytest.approx(2.8)
        assert out.max() == pytest.approx(8.2)
        np.testing.assert_allclose(out[3:8], np.arange(4.0, 9.0))

    def test_constant_series_unchanged(self):
        out, warned = trim_utilities(np.full(9, 3.3))
        np.testing.assert_array_equal(out, np.full(9, 3.3))
        assert not warned

    def test_short_series_passes_through_with_warning(self):
        x = np.array([1.0, 5.0, 9.0])
        out, warned = trim_utilities(x)
        np.testing.assert_array_equal(out, x)
        assert warned


class TestElasticities:
    def setup_method(self):
        self.alpha = 0.1
        self.prices = np.array([10000.0, 12000.0, 9000.0])
        self.intercepts = FIXTURE_DELTA + self.alpha * self.prices / 1000.0
        self.res = compute_shares(FIXTURE_DELTA, FIXTURE_SIGMA)

    def fd_elasticity(self, i, k, h_rel=1e-5):
        p = self.prices
        h = h_rel * p[k]
        up, dn = p.copy(), p.copy()
        up[k] += h
        dn[k] -= h
        s_up = compute_shares(delta_from_prices(self.intercepts, self.alpha, up),
                              FIXTURE_SIGMA).shares[i]
        s_dn = compute_shares(delta_from_prices(self.intercepts, self.alpha, dn),
                              FIXTURE_SIGMA).shares[i]
        return (s_up - s_dn) / (2 * h) * p[k] / self.res.shares[i]

    def test_own_matches_finite_difference(self):
        own = own_elasticity(self.alpha, FIXTURE_SIGMA, self.prices, self.res)
        for i in range(3):
            fd = self.fd_elasticity(i, i)
            assert abs(own[i] - fd) / abs(fd) < 1e-6
        assert np.all(own < 0)

    def test_cross_matches_finite_difference(self):
        ce = cross_elasticity(self.alpha, FIXTURE_SIGMA, self.prices, self.res, 0, 1)
        fd = self.fd_elasticity(0, 1)
        assert abs(ce - fd) / abs(fd) < 1e-6
        assert ce > 0

    def test_randomized_derivative_check(self, rng):
        for _ in range(300):
            delta = rng.normal(0, 1, 3)
            sigma = rng.uniform(0.2, 0.9)
            alpha = rng.uniform(0.02, 0.3)
            p = rng.uniform(2000, 30000, 3)
            inter = delta + alpha * p / 1000.0
            res = compute_shares(delta, sigma)
            mat = cross_elasticity_matrix(alpha, sigma, p, res)
            h = 1e-5 * p
            for k in range(3):
                up, dn = p.copy(), p.copy()
                up[k] += h[k]
                dn[k] -= h[k]
                s_up = compute_shares(delta_from_prices(inter, alpha, up), sigma).shares
                s_dn = compute_shares(delta_from_prices(inter, alpha, dn), sigma).shares
                fd = (s_up - s_dn) / (2 * h[k]) * p[k] / res.shares
                np.testing.assert_allclose(mat[:, k], fd, rtol=1e-6, atol=1e-9)

    def test_plain_logit_limit_single_firm(self):
        # sigma -> 0 with one firm reduces to -alpha * p * (1 - s)
        alpha, p = 0.2, np.array([8000.0])
        res = compute_shares(np.array([0.7]), 1e-12)
        own = own_elasticity(alpha, 1e-12, p, res)
        expected = -alpha * (p[0] / 1000.0) * (1 - res.shares[0])
        assert own[0] == pytest.approx(expected, rel=1e-9)

    def test_symmetric_pair_has_equal_cross(self):
        res = compute_shares(np.array([0.4, 0.4]), 0.7)
        p = np.array([5000.0, 5000.0])
        e12 = cross_elasticity(0.1, 0.7, p, res, 0, 1)
        e21 = cross_elasticity(0.1, 0.7, p, res, 1, 0)
        assert e12 == pytest.approx(e21, rel=1e-14)

    def test_no_nesting_cross_is_alpha_p_share(self):
        sigma = 1e-12
        delta = np.array([0.5, 0.1, -0.3])
        p = np.array([7000.0, 6000.0, 9000.0])
        res = compute_shares(delta, sigma)
        got = cross_elasticity(0.15, sigma, p, res, 0, 2)
        expected = 0.15 * (p[2] / 1000.0) * res.shares[2]
        assert got == pytest.approx(expected, rel=1e-9)

    def test_same_firm_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            cross_elasticity(0.1, 0.5, self.prices, self.res, 1, 1)

    def test_reported_closed_forms_are_tagged(self):
        out = reported_closed_form_elasticities(self.alpha, FIXTURE_SIGMA,
                                                self.prices, self.res)
        assert out["convention"] == "closed_form_table"
        assert out["own"].shape == (3,)


class TestDemandParams:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            DemandParams(sigma=0.95)
        with pytest.raises(ValueError):
            DemandParams(alpha_post=0.001)

    def test_alpha_for_period(self):
        p = DemandParams(alpha_pre=0.12, alpha_post=0.08)
        assert p.alpha_for("pre") == 0.12
        assert p.alpha_for("post") == 0.08
        with pytest.raises(ValueError):
            p.alpha_for("mid")
