"""Test pooling, the grouped Hermite fit and the fitted group surface"""

import math
import unittest

import numpy as np
import pytest

from ndcfair.annuity import fair_cm_table
from ndcfair.data_io import default_truth, generate_synthetic
from ndcfair.exceptions import DomainError
from ndcfair.hermite import (
    AgeGrid,
    HermiteSpec,
    HermiteVariant,
    alpha_curve,
    alpha_eval,
    check_non_crossover,
    gompertz_fit,
)
from ndcfair.national_lc import LCParams, fit_lc_poisson
from ndcfair.subgroup_fit import (
    PooledCell,
    ShapeConstraints,
    SubgroupPanel,
    build_pooled,
    fit_gompertz,
    fit_hsm,
    group_surface,
    information_criteria,
    model_scores,
    period_rates,
    q_objective,
)


def _flat_lc(ages, years, ref_year, kappa, alpha=-4.0):
    count = len(ages)
    return LCParams(ages, years, np.full(count, alpha), np.full(count, 1.0 / count), kappa, ref_year)


def _expected_cells(spec: HermiteSpec, grid: AgeGrid, ages, exposure=1e8):
    """Noise-free pooled cells of a baseline."""
    cells = []
    for j in range(1, spec.groups + 1):
        rates = np.exp(alpha_curve(spec, j, ages, grid))
        cells.extend(
            PooledCell(int(x), j, exposure * rate, exposure) for x, rate in zip(ages, rates)
        )
    return cells


class TestBuildPooled(unittest.TestCase):
    """Test the LC-adjusted pooling of the survey waves"""

    def test_single_wave(self):
        """d = 6 over a 3-year wave with zero period effect"""
        lc = _flat_lc(np.arange(50, 150), np.arange(2011, 2016), 2015, np.zeros(5))
        panel = SubgroupPanel([60], [1], [2015], [100.0], [6.0])
        (cell,) = build_pooled(panel, lc)
        self.assertEqual((cell.x, cell.j), (60, 1))
        self.assertAlmostEqual(cell.d_pool, 2.0, places=14)
        self.assertAlmostEqual(cell.e_eff, 100.0, places=12)

    def test_two_waves(self):
        """beta 0.01 with kappa -10 and 0 discounts the first wave"""
        kappa = np.array([-10.0, -5.0, 0.0])
        lc = _flat_lc(np.arange(50, 150), np.arange(2011, 2014), 2013, kappa)
        panel = SubgroupPanel([60, 60], [1, 1], [2011, 2013], [100.0, 100.0], [4.0, 6.0])
        (cell,) = build_pooled(panel, lc)
        self.assertAlmostEqual(cell.e_eff, 100.0 * math.exp(-0.1) + 100.0, places=10)
        self.assertAlmostEqual(cell.e_eff, 190.4837, places=4)
        self.assertAlmostEqual(cell.d_pool, 5.0, places=14)

    def test_zero_period_effect(self):
        """kappa 0 at every wave sums the exposures"""
        lc = _flat_lc(np.arange(50, 150), np.arange(2011, 2019), 2018, np.zeros(8))
        panel = SubgroupPanel(
            [60, 60, 61], [1, 1, 2], [2011, 2018, 2015], [100.0, 50.0, 70.0], [2.0, 4.0, 3.0]
        )
        cells = {(c.x, c.j): c for c in build_pooled(panel, lc)}
        self.assertAlmostEqual(cells[(60, 1)].e_eff, 150.0, places=12)
        self.assertAlmostEqual(cells[(60, 1)].d_pool, 3.0, places=14)
        self.assertAlmostEqual(cells[(61, 2)].d_pool, 1.0, places=14)

    def test_missing_wave_year(self):
        """A wave outside the national years has no kappa"""
        lc = _flat_lc(np.arange(50, 150), np.arange(2013, 2016), 2015, np.zeros(3))
        panel = SubgroupPanel([60], [1], [2011], [100.0], [6.0])
        with pytest.raises(DomainError, match="wave 2011"):
            build_pooled(panel, lc)


class TestSubgroupPanel(unittest.TestCase):
    """Test subgroup panel validation"""

    def test_annualized(self):
        """Deaths are annualized by the wave interval"""
        panel = SubgroupPanel([60], [1], [2015], [100.0], [6.0])
        np.testing.assert_array_equal(panel.interval_lengths(), [3.0])
        np.testing.assert_array_equal(panel.annualized_deaths(), [2.0])

    def test_deaths_above_exposure(self):
        """Deaths cannot exceed the persons at risk"""
        with pytest.raises(DomainError, match="deaths exceed exposure"):
            SubgroupPanel([60], [1], [2015], [5.0], [6.0])

    def test_unknown_wave(self):
        """Every wave needs an interval length"""
        with pytest.raises(DomainError, match="wave 2016"):
            SubgroupPanel([60], [1], [2016], [100.0], [6.0])

    def test_duplicate(self):
        """A cell may only appear once"""
        with pytest.raises(DomainError, match="duplicate cell"):
            SubgroupPanel([60, 60], [1, 1], [2015, 2015], [100.0, 100.0], [1.0, 2.0])


class TestObjective(unittest.TestCase):
    """Test the pooled Poisson kernel and information criteria"""

    def setUp(self):
        self.grid = AgeGrid()
        self.spec = default_truth().spec

    def test_stationary_cell(self):
        """D = E exp(alpha) gives Q = D alpha - D"""
        alpha = alpha_eval(self.spec, 2, 70, self.grid)
        cell = PooledCell(70, 2, 1000.0 * math.exp(alpha), 1000.0)
        self.assertAlmostEqual(
            q_objective(self.spec, [cell], self.grid), cell.d_pool * alpha - cell.d_pool, places=9
        )

    def test_empty(self):
        """No cells give zero"""
        self.assertEqual(q_objective(self.spec, [], self.grid), 0.0)

    def test_additive(self):
        """Q of two cells is the sum of their parts"""
        cells = [PooledCell(65, 1, 12.0, 900.0), PooledCell(80, 4, 40.0, 700.0)]
        total = q_objective(self.spec, cells, self.grid)
        parts = sum(q_objective(self.spec, [cell], self.grid) for cell in cells)
        self.assertLessEqual(abs(total - parts), 1e-12)

    def test_zero_exposure_dropped(self):
        """Cells without exposure do not count"""
        cells = [PooledCell(65, 1, 12.0, 900.0), PooledCell(66, 1, 0.0, 0.0)]
        self.assertEqual(
            q_objective(self.spec, cells, self.grid),
            q_objective(self.spec, cells[:1], self.grid),
        )

    def test_information_criteria(self):
        """AIC and BIC formulas"""
        aic, _ = information_criteria(-10.0, 0, 17)
        self.assertEqual(aic, 20.0)
        _, bic_small = information_criteria(-10.0, 8, math.exp(2))
        _, bic_large = information_criteria(-10.0, 16, math.exp(2))
        self.assertAlmostEqual(bic_large - bic_small, 2.0 * 8, places=12)
        with pytest.raises(DomainError, match="at least one observation"):
            information_criteria(-10.0, 3, 0)


class TestFitHsm(unittest.TestCase):
    """Test the constrained grouped Hermite fit"""

    @classmethod
    def setUpClass(cls):
        cls.grid = AgeGrid()
        cls.truth = default_truth().spec
        cls.ages = np.arange(50, 101)
        cls.cells = _expected_cells(cls.truth, cls.grid, cls.ages)
        cls.fits = {
            variant: fit_hsm(cls.cells, variant, grid=cls.grid)
            for variant in (
                HermiteVariant.HSM1,
                HermiteVariant.HSM2,
                HermiteVariant.HSM3,
                HermiteVariant.HSM4,
            )
        }

    def test_recovery(self):
        """HSM3 gives back the generating coefficients"""
        spec, report = self.fits[HermiteVariant.HSM3]
        np.testing.assert_allclose(
            spec.coefficient_matrix(), self.truth.coefficient_matrix(), rtol=0, atol=1e-2
        )
        self.assertEqual(report.k, 12)
        self.assertEqual(report.n_cells, 5 * len(self.ages))
        self.assertEqual(report.dropped, 0)
        self.assertEqual(len(report.start_q), 5)
        self.assertGreaterEqual(
            report.q, q_objective(self.truth, self.cells, self.grid) - 1e-9 * abs(report.q)
        )

    def test_constraints_hold(self):
        """Every fitted variant is ordered and non-crossing"""
        for spec, _ in self.fits.values():
            self.assertTrue(check_non_crossover(spec).ok)
            self.assertTrue(np.all(np.diff(spec.theta) <= 1e-9))
            if len(spec.mu0) > 1:
                self.assertTrue(np.all(np.diff(spec.mu0) >= -1e-9))
                self.assertGreaterEqual(min(spec.mu0), -1e-9)

    def test_ordered_groups(self):
        """Strictly ordered group rates give strictly decreasing theta"""
        spec, _ = self.fits[HermiteVariant.HSM3]
        self.assertTrue(np.all(np.diff(spec.theta) < 0))

    def test_shared_omega(self):
        """Under HSM3 every group meets at the oldest age"""
        spec, _ = self.fits[HermiteVariant.HSM3]
        values = [alpha_eval(spec, j, self.grid.x1, self.grid) for j in range(1, 6)]
        self.assertEqual(len(set(values)), 1)

    def test_nesting(self):
        """Richer variants never fit worse"""
        q = {variant: report.q for variant, (_, report) in self.fits.items()}
        slack = 1e-7 * abs(q[HermiteVariant.HSM1])
        self.assertGreaterEqual(q[HermiteVariant.HSM1], q[HermiteVariant.HSM2] - slack)
        self.assertGreaterEqual(q[HermiteVariant.HSM1], q[HermiteVariant.HSM3] - slack)
        self.assertGreaterEqual(q[HermiteVariant.HSM2], q[HermiteVariant.HSM4] - slack)
        self.assertGreaterEqual(q[HermiteVariant.HSM3], q[HermiteVariant.HSM4] - slack)

    def test_scores(self):
        """Fewer parameters for HSM4 than HSM1"""
        _, small = self.fits[HermiteVariant.HSM4]
        _, large = self.fits[HermiteVariant.HSM1]
        self.assertEqual(small.k, 8)
        self.assertEqual(large.k, 16)
        aic, bic = model_scores(small)
        self.assertAlmostEqual(aic, 2 * 8 - 2 * small.log_likelihood, places=6)
        self.assertAlmostEqual(bic, 8 * math.log(small.n_cells) - 2 * small.log_likelihood, places=6)

    def test_deterministic(self):
        """The same seed reproduces the fit"""
        again, _ = fit_hsm(self.cells, HermiteVariant.HSM4, grid=self.grid)
        first, _ = self.fits[HermiteVariant.HSM4]
        self.assertEqual(again, first)

    def test_single_group_beats_gompertz(self):
        """With one group the Hermite fit is at least as good as Gompertz"""
        cells = [cell for cell in self.cells if cell.j == 1]
        spec, report = fit_hsm(cells, HermiteVariant.HSM1, grid=self.grid)
        gompertz = gompertz_fit(cells, self.grid)
        self.assertEqual(spec.groups, 1)
        self.assertGreaterEqual(
            report.q, q_objective(gompertz, cells, self.grid) - 1e-9 * abs(report.q)
        )

    def test_gompertz_variants(self):
        """Gompertz variants are reported like the Hermite ones"""
        free, free_report = fit_gompertz(self.cells, HermiteVariant.GOMPERTZ_FREE, self.grid)
        self.assertEqual(free, gompertz_fit(self.cells, self.grid))
        self.assertEqual(free_report.k, 10)
        self.assertEqual(free_report.n_cells, 5 * len(self.ages))
        self.assertAlmostEqual(free_report.q, q_objective(free, self.cells, self.grid))

        constrained, report = fit_gompertz(
            self.cells, HermiteVariant.GOMPERTZ_CONSTRAINED, self.grid
        )
        self.assertEqual(constrained.variant, HermiteVariant.GOMPERTZ_CONSTRAINED)
        self.assertTrue(check_non_crossover(constrained).ok)
        self.assertLessEqual(report.q, free_report.q + 1e-9 * abs(free_report.q))
        with pytest.raises(DomainError, match="fit_hsm"):
            fit_gompertz(self.cells, HermiteVariant.HSM3)

    def test_unconstrained(self):
        """Switching the restrictions off still fits"""
        constraints = ShapeConstraints(False, False, False)
        spec, report = fit_hsm(self.cells, HermiteVariant.HSM3, constraints, self.grid)
        self.assertEqual(spec.groups, 5)
        self.assertTrue(np.isfinite(report.q))

    def test_errors(self):
        """Invalid inputs are rejected"""
        with pytest.raises(DomainError, match="fit_gompertz"):
            fit_hsm(self.cells, HermiteVariant.GOMPERTZ_FREE)
        with pytest.raises(DomainError, match="groups must be numbered"):
            fit_hsm([PooledCell(60, 2, 1.0, 10.0)], HermiteVariant.HSM4)
        with pytest.raises(DomainError, match="no deaths"):
            fit_hsm([PooledCell(60, 1, 0.0, 10.0), PooledCell(61, 1, 0.0, 10.0)],
                    HermiteVariant.HSM4)


class TestGroupSurface(unittest.TestCase):
    """Test the fitted group death rates"""

    def setUp(self):
        self.grid = AgeGrid()
        self.spec = default_truth().spec
        self.lc = default_truth().lc

    def test_reference_year(self):
        """At kappa 0 the rate is exp(alpha)"""
        expected = math.exp(alpha_eval(self.spec, 3, 70, self.grid))
        self.assertAlmostEqual(group_surface(self.spec, self.lc, 70, 3, 2020, self.grid), expected, places=15)

    def test_arithmetic(self):
        """alpha -4 with beta kappa -0.5 gives exp(-4.5)"""
        spec = HermiteSpec(HermiteVariant.HSM3, (-4.0,), (-4.0,), (0.0,), (0.0,))
        lc = _flat_lc(np.arange(50, 100), np.arange(2000, 2011), 2010, np.linspace(-25.0, 0.0, 11))
        self.assertAlmostEqual(group_surface(spec, lc, 60, 1, 2000, self.grid), 0.011109, places=6)
        self.assertAlmostEqual(group_surface(spec, lc, 60, 1, 2000, self.grid), math.exp(-4.5), places=15)

    def test_out_of_range(self):
        """Years outside the national fit are rejected"""
        with pytest.raises(DomainError, match="year 2021"):
            group_surface(self.spec, self.lc, 70, 1, 2021, self.grid)

    def test_period_rates(self):
        """Vectorized rates match the pointwise surface"""
        ages = np.arange(60, 101)
        rates = period_rates(self.spec, self.lc, 2, self.lc.kappa_at(2011), self.grid, ages=ages)
        expected = [group_surface(self.spec, self.lc, x, 2, 2011, self.grid) for x in ages]
        np.testing.assert_allclose(rates, expected, rtol=1e-12)

    def test_period_rates_beyond_national_ages(self):
        """beta is held flat above the oldest national age"""
        rates = period_rates(self.spec, self.lc, 1, np.array([0.0, -10.0]), self.grid)
        self.assertEqual(rates.shape, (2, 70))
        ratio = rates[1] / rates[0]
        self.assertAlmostEqual(ratio[-1], ratio[50], places=12)


class TestSyntheticRecovery(unittest.TestCase):
    """Poisson panels from a known model through both fits"""

    @classmethod
    def setUpClass(cls):
        cls.truth = default_truth(exposure_scale=1e8, seed=2020)
        national, subgroup = generate_synthetic(cls.truth)
        cls.lc, _ = fit_lc_poisson(national, 2020)
        cls.spec, cls.report = fit_hsm(
            build_pooled(subgroup, cls.lc), HermiteVariant.HSM3, grid=cls.truth.grid
        )

    def test_national(self):
        """Lee-Carter parameters within 1e-2"""
        for name in ("alpha", "beta", "kappa"):
            np.testing.assert_allclose(
                getattr(self.lc, name), getattr(self.truth.lc, name), rtol=0, atol=1e-2
            )

    def test_baselines(self):
        """Hermite coefficients within 1e-2"""
        np.testing.assert_allclose(
            self.spec.coefficient_matrix(), self.truth.spec.coefficient_matrix(), rtol=0, atol=1e-2
        )
        self.assertTrue(check_non_crossover(self.spec).ok)

    def test_fair_counting_months(self):
        """Fair counting months within 0.2 months of the generating model"""
        fitted = fair_cm_table(self.spec, self.lc, 2020)
        expected = fair_cm_table(self.truth.spec, self.truth.lc, 2020)
        np.testing.assert_allclose(fitted["m_fair"], expected["m_fair"], rtol=0, atol=0.2)
