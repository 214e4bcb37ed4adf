"""Survival tables, tail fits, constants, and the convolution check."""

import math

import numpy as np
import pytest

from kbrw import models, stats, trees
from kbrw.estimates import binomial_estimate
from kbrw.seeds import rng_for_block

RHO_C = math.log(2.0 + math.sqrt(3.0))
RHO_MINUS = math.log(5.0 - math.sqrt(6.0))
R_GEOM = (31.0 - 10.0 * math.sqrt(6.0)) / 19.0   # two-point renewal ratio


def pareto(rng, n, p=2.0):
    return (1.0 - rng.random(n)) ** (-1.0 / p)


class TestSurvivalCurve:
    def test_exceedances_nonincreasing(self):
        rng = rng_for_block(500, 0)
        tab = stats.survival_curve(pareto(rng, 100_000), [2.0, 4.0, 8.0, 16.0])
        assert np.all(np.diff(tab.exceedances) <= 0)
        assert all(e.n_effective == 100_000 for e in tab.estimates)

    def test_censoring_flags_and_counts(self):
        counts = np.array([5, 50, 500])
        trunc = np.array([False, True, False])
        tab = stats.survival_curve(counts, [10.0, 100.0], truncated=trunc)
        # the truncated tree's partial count 50 exceeds 10 but not 100
        assert tab.exceedances.tolist() == [2, 1]
        assert not tab.flagged[0]          # every truncated tree counted
        assert tab.flagged[1]              # 50 <= 100: lower bound only
        assert tab.estimates[0].truncated_fraction == pytest.approx(1 / 3)

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError, match="increasing"):
            stats.survival_curve(np.arange(10), [4.0, 4.0])


class TestTailFit:
    def test_synthetic_power_law_slope(self):
        rng = rng_for_block(501, 0)
        tab = stats.survival_curve(pareto(rng, 2_000_000),
                                   [2.0 ** k for k in range(2, 10)])
        rep = stats.tail_fit(tab, "subcritical", rho_ratio=-2.0)
        fit = rep.fitted_exponent_or_constant
        assert rep.mode == "SubcriticalSlope"
        assert abs(fit.value + 2.0) < 4.0 * fit.stderr
        assert rep.extra["relative_deviation"] < 0.02
        assert rep.diagnostics < 5.0

    def test_synthetic_plateau_constant(self):
        N = 10_000_000
        c = 0.5
        grid = np.array([2.0 ** k for k in range(5, 11)])
        exc = np.round(N * c / (grid * np.log(grid) ** 2)).astype(np.int64)
        tab = stats.SurvivalTable(
            grid=grid, estimates=[binomial_estimate(int(k), N) for k in exc],
            exceedances=exc, flagged=np.zeros(grid.size, bool), n_replicas=N)
        rep = stats.tail_fit(tab, "critical")
        assert rep.mode == "CriticalPlateau"
        assert abs(rep.fitted_exponent_or_constant.value - c) / c < 0.02
        assert rep.diagnostics < 1.05

    def test_insufficient_exceedances_lists_achievable_grid(self):
        rng = rng_for_block(501, 1)
        tab = stats.survival_curve(pareto(rng, 3000), [2.0, 4.0, 128.0, 512.0, 2048.0])
        with pytest.raises(ValueError, match=r"achievable grid: \[2\.0, 4\.0\]"):
            stats.tail_fit(tab, "subcritical")

    def test_rejects_regime_without_tail_law(self):
        rng = rng_for_block(501, 2)
        tab = stats.survival_curve(pareto(rng, 100_000), [2.0, 4.0, 8.0, 16.0])
        with pytest.raises(ValueError, match="regime"):
            stats.tail_fit(tab, "out_of_scope")


class TestConstants:
    def test_critical_lattice_closed_forms(self):
        m = models.critical_lattice_binary()
        con = stats.estimate_constants(m, "critical", 50_000, rng_for_block(502, 0))
        # the tilted walk is skip-free down, so the undershoot is exactly 1
        # and every functional collapses to its closed form
        assert con["c_prime_crit"].value == pytest.approx(1.0 + math.sqrt(3.0), abs=1e-9)
        assert con["c_crit"].value == pytest.approx(con["c_prime_crit"].value, abs=1e-12)
        assert con["c_star"].value == pytest.approx((1.0 + math.sqrt(3.0)) / RHO_C, abs=1e-9)
        assert con["C_R"].value == pytest.approx(1.0, abs=1e-12)
        assert con["c_prime_crit"].truncated_fraction < 0.01

    def test_subcritical_two_point_closed_forms(self):
        m = models.two_point_subcritical()
        con = stats.estimate_constants(m, "subcritical", 100_000, rng_for_block(502, 1))
        target = (math.exp(RHO_MINUS) - 1.0) / RHO_MINUS
        assert con["c_star_sub"].value == pytest.approx(target, abs=1e-9)
        q = con["q_no_return"]
        assert abs(q.value - (1.0 - R_GEOM)) < 4.0 * q.stderr
        assert q.extra["certification_bound"] < 1e-12
        cr = con["C_R"]
        assert abs(cr.value - 1.0 / (1.0 - R_GEOM)) < 4.0 * cr.stderr

    def test_regime_mismatch_is_rejected(self):
        m = models.critical_lattice_binary()
        with pytest.raises(ValueError, match="critical"):
            stats.estimate_constants(m, "subcritical", 100, rng_for_block(502, 2))


class TestYaglom:
    def test_identical_law_synthetic(self):
        rng = rng_for_block(503, 0)

        def fake(t, p):
            n = 4000
            return trees.YaglomDataset(
                t=t, rho=1.0, H=np.ones(n, np.int64),
                overshoots=[np.array([1.0])] * n,
                tilted_mass=np.exp(rng.standard_normal(n)),
                min_overshoot=rng.random(n),
                p_survival=binomial_estimate(int(round(p * 10 ** 6)), 10 ** 6),
                n_replicas=10 ** 6, truncated_fraction=0.0)

        rep = stats.yaglom_diagnostic(fake(2.0, 1e-3 * math.exp(-2.0)),
                                      fake(4.0, 1e-3 * math.exp(-4.0)),
                                      "subcritical")
        assert rep.ks_min_overshoot[1] > 0.01
        assert rep.ks_log_mass[1] > 0.01
        assert abs(rep.ratio.value - 1.0) < 4.0 * rep.ratio.stderr

    def test_lattice_levels_compare(self):
        m = models.critical_lattice_binary()
        d2 = trees.yaglom_samples(m, 0.0, 2.0, 150_000, rng_for_block(503, 1))
        d4 = trees.yaglom_samples(m, 0.0, 4.0, 150_000, rng_for_block(503, 2))
        rep = stats.yaglom_diagnostic(d2, d4, "critical")
        assert rep.ks_min_overshoot[0] == 0.0      # overshoot is exactly 1
        assert rep.ks_log_mass[1] > 0.01
        assert 0.5 < rep.ratio.value < 2.0

    def test_orders_levels(self):
        m = models.critical_lattice_binary()
        d = trees.yaglom_samples(m, 0.0, 1.0, 20_000, rng_for_block(503, 3))
        with pytest.raises(ValueError, match="lower level"):
            stats.yaglom_diagnostic(d, d, "critical")


class TestConvolution:
    ONE = staticmethod(lambda rng, n: np.ones(n))
    TWO = staticmethod(lambda rng, n: np.full(n, 2))

    def test_pareto_sampler_is_exact(self):
        from scipy import stats as sps
        g = stats.pareto_samples(rng_for_block(504, 0), 50_000, 2.0, 1.0)
        assert g.min() >= 1.0
        ks = sps.kstest(g, lambda t: 1.0 - np.minimum(t, np.inf) ** -2.0)
        assert ks.pvalue > 0.01

    def test_single_term_identity(self):
        rep = stats.convolution_tail_check(self.ONE, self.ONE, 2.0, 1.0,
                                           1_000_000, [5.0, 10.0, 20.0, 40.0],
                                           rng_for_block(504, 1))
        top = rep.scaled_tail[-1]
        assert abs(top.value - 1.0) < 4.0 * top.stderr
        assert rep.limit.value == pytest.approx(1.0, abs=1e-12)
        assert rep.limit.stderr == 0.0

    def test_two_term_sum_approaches_doubled_limit(self):
        rep = stats.convolution_tail_check(self.TWO, self.ONE, 2.0, 1.0,
                                           1_000_000, [10.0, 20.0, 40.0, 80.0],
                                           rng_for_block(504, 2))
        assert rep.limit.value == pytest.approx(2.0, abs=1e-12)
        # preasymptotic level sits a few percent above 2 at t = 80
        assert rep.relative_deviation_at_top < 0.25
        vals = [e.value for e in rep.scaled_tail]
        assert vals[0] > vals[-1] > rep.limit.value * 0.9

    def test_first_moment_case(self):
        rep = stats.convolution_tail_check(self.ONE, self.ONE, 1.0, 1.0,
                                           1_000_000, [5.0, 10.0, 20.0, 40.0],
                                           rng_for_block(504, 3))
        top = rep.scaled_tail[-1]
        assert abs(top.value - 1.0) < 4.0 * top.stderr

    def test_rejects_negative_litters(self):
        bad = lambda rng, n: np.full(n, -1)
        with pytest.raises(ValueError, match="nonnegative"):
            stats.convolution_tail_check(bad, self.ONE, 2.0, 1.0, 100,
                                         [5.0], rng_for_block(504, 4))


class TestCouplingProbe:
    def test_real_forest_rate_is_zero(self):
        m = models.critical_lattice_binary()
        fwd = trees.simulate_killed_forest(m, 0.0, [], 100_000,
                                           rng_for_block(505, 0))
        probe = stats.coupling_probe(fwd.Z, fwd.leaves, m.mean_offspring,
                                     [8.0, 32.0, 128.0])
        assert all(e.value < 0.05 for e in probe.values())

    def test_shuffled_records_light_up(self):
        # pairing Z with another tree's leaf count breaks the coupling;
        # binary offspring makes leaves = Z + 1 exactly, so the paired rate
        # is identically zero while the shuffled one is ~0.11 at n = 3
        m = models.critical_lattice_binary()
        fwd = trees.simulate_killed_forest(m, 0.0, [], 50_000,
                                           rng_for_block(505, 1))
        paired = stats.coupling_probe(fwd.Z, fwd.leaves, m.mean_offspring, [3.0])
        assert paired[3.0].value == 0.0
        rng = rng_for_block(505, 2)
        shuffled = fwd.leaves[rng.permutation(fwd.leaves.size)]
        probe = stats.coupling_probe(fwd.Z, shuffled, m.mean_offspring, [3.0])
        assert probe[3.0].value > 0.01

    def test_rejects_unpaired_arrays(self):
        with pytest.raises(ValueError, match="paired"):
            stats.coupling_probe(np.arange(5), np.arange(6), 2.0, [4.0])
