"""Test the income-dependent annuitization rules"""

import unittest
from functools import partial

import numpy as np
import pytest
from scipy.integrate import quad

from ndcfair.data_io import default_truth
from ndcfair.exceptions import DomainError, InfeasibleScheduleError, NotchError
from ndcfair.rules import (
    DEFAULT_PHI,
    DEFAULT_ANCHORS,
    DEFAULT_QUINTILES,
    AnchorBenchmark,
    FairAnchors,
    IncomeQuintiles,
    MortalityBenchmark,
    RuleKind,
    RuleSchedule,
    alpha_continuous,
    average_cm,
    benefit,
    calibrate_all,
    calibration_objective,
    evaluation_table,
    fair_cm_continuous,
    implied_marginal,
    implied_marginal_grid,
    marginal_cm,
    method1_avg,
    method1_schedule,
    method2_avg,
    method2_schedule,
    method2_slope,
    method3_anchor_benefits,
    method3_benefit,
    method3_calibrate,
    method3_exact,
    method3_feasibility,
    method4_anchor_benefits,
    method4_benefit,
    method4_calibrate,
    method4_exact,
    method4_feasibility,
    normalized_benefit,
    official_residual,
    partial_integral,
    residual_subsidy,
    segment_integral,
)

MEANS = DEFAULT_QUINTILES.means


def _anchors_from_method3(deltas) -> FairAnchors:
    q = method3_anchor_benefits(np.array(deltas, dtype=float), DEFAULT_QUINTILES)
    return FairAnchors(tuple(np.array(MEANS) / q))


def _anchors_from_method4(deltas) -> FairAnchors:
    q = method4_anchor_benefits(np.array(deltas, dtype=float), DEFAULT_QUINTILES)
    return FairAnchors(tuple(np.array(MEANS) / q))


def _linear_delta(a, b, k_lo, k_hi):
    return lambda c: 1.0 / (a + (b - a) * (c - k_lo) / (k_hi - k_lo))


def _random_monotone(center, count, spread, seed):
    rng = np.random.default_rng(seed)
    candidates = center + rng.normal(0.0, spread, (count, len(center)))
    return np.sort(candidates, axis=1)


class TestQuintiles(unittest.TestCase):
    """Test the income bracket definitions"""

    def test_default_values(self):
        """Anchor benefits are means over months"""
        q = DEFAULT_ANCHORS.normalized_benefits(DEFAULT_QUINTILES)
        self.assertAlmostEqual(q[0], 2181 / 157.0, places=12)
        np.testing.assert_array_equal(DEFAULT_QUINTILES.interior, [3847, 8838, 17651, 31300])

    def test_validation(self):
        """Means must sit inside their brackets"""
        with pytest.raises(DomainError, match="outside bracket 2"):
            IncomeQuintiles((100, 300), (0, 310, float("inf")))
        with pytest.raises(DomainError, match="start at 0"):
            IncomeQuintiles((100, 300), (1, 200, float("inf")))
        with pytest.raises(DomainError, match="positive"):
            FairAnchors((157.0, 0.0))


class TestContinuousBenchmark(unittest.TestCase):
    """Test the income-interpolated fair benchmark"""

    def test_alpha_continuous(self):
        """Knot values, midpoints and clamping"""
        alphas = [-4.0, -4.1, -4.3, -4.4, -4.6]
        self.assertEqual(alpha_continuous(MEANS[2], 60, alphas, DEFAULT_QUINTILES), -4.3)
        midpoint = (MEANS[0] + MEANS[1]) / 2
        self.assertAlmostEqual(alpha_continuous(midpoint, 60, alphas, DEFAULT_QUINTILES), -4.05, places=12)
        self.assertEqual(alpha_continuous(1e9, 60, alphas, DEFAULT_QUINTILES), -4.6)
        self.assertEqual(alpha_continuous(0.0, 60, alphas, DEFAULT_QUINTILES), -4.0)

    def test_mortality_benchmark(self):
        """The interpolated curve reproduces and brackets the anchors"""
        truth = default_truth()
        benchmark = MortalityBenchmark(truth.spec, truth.lc, DEFAULT_QUINTILES)
        anchors = benchmark.anchor_months()
        self.assertTrue(np.all(np.diff(anchors.months) > 0))
        self.assertAlmostEqual(fair_cm_continuous(MEANS[0], benchmark), anchors.months[0], places=10)
        self.assertAlmostEqual(fair_cm_continuous(1e7, benchmark), anchors.months[-1], places=10)
        between = fair_cm_continuous((MEANS[1] + MEANS[2]) / 2, benchmark)
        self.assertTrue(anchors.months[1] < between < anchors.months[2])
        values = benchmark.fair_cm(np.array([1000.0, 5000.0]))
        self.assertEqual(values.shape, (2,))

    def test_negative_income(self):
        """Incomes must be non-negative"""
        with pytest.raises(DomainError, match="non-negative"):
            fair_cm_continuous(-1.0, AnchorBenchmark(DEFAULT_ANCHORS, DEFAULT_QUINTILES))


class TestAverageRules(unittest.TestCase):
    """Test methods 1 and 2"""

    def test_method1_brackets(self):
        """Brackets are half open with the boundary in the lower one"""
        self.assertEqual(method1_avg(1000, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 157.0)
        self.assertEqual(method1_avg(3847, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 157.0)
        self.assertEqual(method1_avg(3847.001, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 158.1)
        self.assertEqual(method1_avg(0, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 157.0)
        self.assertEqual(method1_avg(1e6, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 161.1)

    def test_method2_interpolation(self):
        """Linear between means, clamped outside"""
        self.assertAlmostEqual(method2_avg(51499, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 161.0960, places=3)
        self.assertEqual(method2_avg(100, DEFAULT_ANCHORS, DEFAULT_QUINTILES), 157.0)
        self.assertAlmostEqual(method2_avg(MEANS[3], DEFAULT_ANCHORS, DEFAULT_QUINTILES), 160.0, places=12)

    def test_method2_marginal(self):
        """Finite-difference and analytic marginal counting months"""
        average = partial(method2_avg, anchors=DEFAULT_ANCHORS, quintiles=DEFAULT_QUINTILES)
        slope = partial(method2_slope, anchors=DEFAULT_ANCHORS, quintiles=DEFAULT_QUINTILES)
        self.assertAlmostEqual(implied_marginal(average, 51499, h=100), 163.17, delta=0.05)
        self.assertAlmostEqual(implied_marginal(average, 60000, slope=slope), 161.1, places=10)

    def test_constant_marginal(self):
        """A constant average divisor is also the marginal one"""
        self.assertAlmostEqual(implied_marginal(lambda k: 160.0, 1000.0, slope=lambda k: 0.0), 160.0)
        self.assertAlmostEqual(implied_marginal(lambda k: 160.0, 1000.0, h=50.0), 160.0, places=9)

    def test_method1_notch(self):
        """The step rule loses benefit across a boundary"""
        average = partial(method1_avg, anchors=DEFAULT_ANCHORS, quintiles=DEFAULT_QUINTILES)
        with pytest.raises(NotchError, match="does not increase"):
            implied_marginal(average, 3840.0, h=10.0)

    def test_benefits(self):
        """Benefits at the anchors"""
        rules = calibrate_all(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        self.assertAlmostEqual(benefit(MEANS[0], rules[RuleKind.AVG_STEP]), 2.4 * 2181 / 157.0, places=10)
        self.assertAlmostEqual(benefit(MEANS[0], rules[RuleKind.AVG_STEP]), 33.34, places=2)
        for j, month in enumerate(DEFAULT_ANCHORS.months):
            self.assertAlmostEqual(
                benefit(MEANS[j], rules[RuleKind.AVG_LINEAR]), DEFAULT_PHI * MEANS[j] / month, places=10
            )
        for rule in rules.values():
            self.assertEqual(benefit(0.0, rule), 0.0)


class TestMethod3(unittest.TestCase):
    """Test the marginal step rule"""

    def test_exact_default(self):
        """The exact recursion on the default anchors"""
        exact = method3_exact(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        np.testing.assert_allclose(exact.deltas, [157.0, 160.0, 159.4, 162.8, 161.8], atol=0.05)
        benefits = method3_anchor_benefits(np.array(exact.deltas), DEFAULT_QUINTILES)
        np.testing.assert_allclose(
            benefits, DEFAULT_ANCHORS.normalized_benefits(DEFAULT_QUINTILES), rtol=0, atol=1e-9
        )
        self.assertEqual(exact.cumulative[0], 0.0)
        self.assertAlmostEqual(exact.cumulative[1], 3847 / exact.deltas[0], places=12)

    def test_single_bracket(self):
        """One bracket gives its anchor month"""
        quintiles = IncomeQuintiles((2000.0,), (0.0, float("inf")))
        exact = method3_exact(FairAnchors((157.0,)), quintiles)
        self.assertAlmostEqual(exact.deltas[0], 157.0, places=12)

    def test_constant_months(self):
        """Constant anchors reproduce that month in every bracket"""
        exact = method3_exact(FairAnchors((160.0,) * 5), DEFAULT_QUINTILES)
        np.testing.assert_allclose(exact.deltas, 160.0, rtol=1e-12)

    def test_infeasible(self):
        """Lower brackets already deliver the second anchor"""
        anchors = FairAnchors((157.0, 300.0, 300.0, 300.0, 300.0))
        with pytest.raises(InfeasibleScheduleError) as info:
            method3_exact(anchors, DEFAULT_QUINTILES)
        self.assertEqual((info.value.bracket, info.value.side), (2, "lower"))
        steps = method3_feasibility(anchors, DEFAULT_QUINTILES)
        self.assertEqual(len(steps), 2)
        self.assertEqual(steps[-1].side, "lower")

    def test_feasibility_default(self):
        """The default anchors break monotonicity in brackets 3 and 5"""
        steps = method3_feasibility(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        self.assertEqual([step.side for step in steps], [None, None, "upper", None, "upper"])

    def test_calibration_default(self):
        """The calibrated schedule is monotone and not beaten by random search"""
        schedule = method3_calibrate(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        deltas = np.array(schedule.values)
        q = DEFAULT_ANCHORS.normalized_benefits(DEFAULT_QUINTILES)
        self.assertTrue(np.all(np.diff(deltas) >= 0))
        self.assertGreater(schedule.objective, 0.0)
        self.assertAlmostEqual(
            schedule.objective,
            float(calibration_objective(method3_anchor_benefits(deltas, DEFAULT_QUINTILES), q)),
            places=15,
        )
        candidates = _random_monotone(deltas, 100000, 0.5, seed=31)
        scores = calibration_objective(method3_anchor_benefits(candidates, DEFAULT_QUINTILES), q)
        self.assertGreaterEqual(scores.min(), schedule.objective - 1e-10)

    def test_calibration_feasible(self):
        """Monotone exact matches are returned unchanged"""
        deltas = [157.0, 158.0, 159.5, 160.0, 161.0]
        anchors = _anchors_from_method3(deltas)
        schedule = method3_calibrate(anchors, DEFAULT_QUINTILES)
        self.assertLess(schedule.objective, 1e-18)
        np.testing.assert_allclose(schedule.values, deltas, rtol=1e-8)

    def test_benefit_function(self):
        """Continuity at boundaries, anchors and bracket slopes"""
        deltas = [157.0, 158.0, 159.5, 160.0, 161.0]
        anchors = _anchors_from_method3(deltas)
        schedule = method3_calibrate(anchors, DEFAULT_QUINTILES)
        q = anchors.normalized_benefits(DEFAULT_QUINTILES)
        np.testing.assert_allclose(method3_benefit(np.array(MEANS), schedule), q, rtol=1e-9)
        for boundary in DEFAULT_QUINTILES.interior:
            below = method3_benefit(boundary, schedule)
            above = method3_benefit(boundary + 1e-7, schedule)
            self.assertLess(abs(above - below), 1e-8)
        self.assertEqual(method3_benefit(0.0, schedule), 0.0)
        self.assertAlmostEqual(
            method3_benefit(5001.0, schedule) - method3_benefit(5000.0, schedule),
            1.0 / schedule.values[1],
            places=10,
        )
        self.assertEqual(marginal_cm(5000.0, schedule), schedule.values[1])

    def test_schedule_validation(self):
        """Marginal schedules must be increasing and consistent"""
        with pytest.raises(DomainError, match="weakly increasing"):
            RuleSchedule(RuleKind.MARGINAL_STEP, (3847.0,), (160.0, 150.0), (0.0, 3847.0 / 160.0))
        with pytest.raises(DomainError, match="inconsistent"):
            RuleSchedule(RuleKind.MARGINAL_STEP, (3847.0,), (150.0, 160.0), (0.0, 1.0))
        with pytest.raises(DomainError, match="knots"):
            RuleSchedule(RuleKind.AVG_STEP, (3847.0,), (150.0,))


class TestSegmentIntegral(unittest.TestCase):
    """Test the closed-form integrals of a linear marginal month"""

    def test_constant(self):
        """Equal ends give width over month"""
        self.assertAlmostEqual(segment_integral(160.0, 160.0, 0.0, 100.0), 0.625, places=15)

    def test_closed_form(self):
        """Rising ends give the logarithmic form"""
        value = segment_integral(150.0, 160.0, 0.0, 1000.0)
        self.assertAlmostEqual(value, 100.0 * np.log(160.0 / 150.0), places=12)
        self.assertAlmostEqual(value, 6.4539, delta=1e-4)

    def test_near_constant_limit(self):
        """The series branch joins the constant case"""
        a = 158.0
        b = a * (1 + 1e-9)
        self.assertLess(abs(segment_integral(a, b, 0.0, 10.0) - 10.0 / a), 1e-10)
        closed = 1000.0 / a * np.log1p(b / a - 1.0) / (b / a - 1.0)
        self.assertLess(abs(segment_integral(a, b, 0.0, 1000.0) - closed), 1e-12)

    def test_against_quadrature(self):
        """Closed forms match adaptive quadrature"""
        rng = np.random.default_rng(23)
        for _ in range(200):
            a, b = rng.uniform(100.0, 200.0, 2)
            k_lo = rng.uniform(0.0, 20000.0)
            k_hi = k_lo + rng.uniform(100.0, 30000.0)
            integrand = _linear_delta(a, b, k_lo, k_hi)
            full, _ = quad(integrand, k_lo, k_hi, epsabs=1e-13, epsrel=1e-13)
            self.assertLess(abs(segment_integral(a, b, k_lo, k_hi) - full), 1e-8)
            K = rng.uniform(k_lo, k_hi)
            part, _ = quad(integrand, k_lo, K, epsabs=1e-13, epsrel=1e-13)
            self.assertLess(abs(partial_integral(a, b, k_lo, k_hi, K) - part), 1e-8)

    def test_partial_at_end(self):
        """The partial integral up to the segment end is the full one"""
        self.assertAlmostEqual(
            partial_integral(150.0, 170.0, 2181.0, 6131.0, 6131.0),
            segment_integral(150.0, 170.0, 2181.0, 6131.0),
            places=13,
        )
        self.assertEqual(partial_integral(150.0, 170.0, 2181.0, 6131.0, 2181.0), 0.0)

    def test_non_positive(self):
        """Months must be positive"""
        with pytest.raises(DomainError, match="positive"):
            segment_integral(0.0, 160.0, 0.0, 100.0)


class TestMethod4(unittest.TestCase):
    """Test the marginal linear rule"""

    def test_exact_default(self):
        """The exact knots on the default anchors"""
        exact = method4_exact(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        np.testing.assert_allclose(exact.deltas, [157.0, 160.4, 158.8, 163.8, 160.3], atol=0.05)
        benefits = method4_anchor_benefits(np.array(exact.deltas), DEFAULT_QUINTILES)
        np.testing.assert_allclose(benefits, exact.benefits, rtol=0, atol=1e-9)

    def test_constant_increment(self):
        """Increments of width over month keep the knot"""
        exact = method4_exact(FairAnchors((160.0,) * 5), DEFAULT_QUINTILES)
        np.testing.assert_allclose(exact.deltas, 160.0, rtol=1e-9)

    def test_infeasible(self):
        """A falling anchor benefit has no positive knot"""
        anchors = FairAnchors((157.0, 500.0, 600.0, 700.0, 800.0))
        with pytest.raises(InfeasibleScheduleError) as info:
            method4_exact(anchors, DEFAULT_QUINTILES)
        self.assertEqual((info.value.bracket, info.value.side), (2, "lower"))

    def test_feasibility_default(self):
        """The default anchors need falling knots 3 and 5"""
        steps = method4_feasibility(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        self.assertEqual([step.side for step in steps], [None, None, "upper", None, "upper"])

    def test_calibration_default(self):
        """The calibrated knots are monotone and not beaten by random search"""
        schedule = method4_calibrate(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        deltas = np.array(schedule.values)
        q = DEFAULT_ANCHORS.normalized_benefits(DEFAULT_QUINTILES)
        self.assertTrue(np.all(np.diff(deltas) >= 0))
        self.assertGreater(schedule.objective, 0.0)
        candidates = _random_monotone(deltas, 100000, 0.5, seed=37)
        scores = calibration_objective(method4_anchor_benefits(candidates, DEFAULT_QUINTILES), q)
        self.assertGreaterEqual(scores.min(), schedule.objective - 1e-10)

    def test_calibration_feasible(self):
        """Monotone exact matches are returned unchanged"""
        deltas = [157.0, 158.0, 159.5, 160.0, 161.0]
        anchors = _anchors_from_method4(deltas)
        np.testing.assert_allclose(method4_exact(anchors, DEFAULT_QUINTILES).deltas, deltas, rtol=1e-9)
        schedule = method4_calibrate(anchors, DEFAULT_QUINTILES)
        self.assertLess(schedule.objective, 1e-18)
        np.testing.assert_allclose(schedule.values, deltas, rtol=1e-8)

    def test_benefit_function(self):
        """Anchors, origin and the marginal month at the knots"""
        deltas = [157.0, 158.0, 159.5, 160.0, 161.0]
        schedule = method4_calibrate(_anchors_from_method4(deltas), DEFAULT_QUINTILES)
        np.testing.assert_allclose(
            method4_benefit(np.array(MEANS), schedule), schedule.cumulative, rtol=1e-12
        )
        self.assertEqual(method4_benefit(0.0, schedule), 0.0)
        self.assertAlmostEqual(marginal_cm(MEANS[2], schedule), schedule.values[2], places=12)
        self.assertAlmostEqual(marginal_cm(1e6, schedule), schedule.values[-1], places=12)


class TestEvaluation(unittest.TestCase):
    """Test residual subsidies and the dense evaluation grid"""

    @classmethod
    def setUpClass(cls):
        cls.rules = calibrate_all(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        cls.benchmark = AnchorBenchmark(DEFAULT_ANCHORS, DEFAULT_QUINTILES)
        cls.grid = np.arange(500, 120001, 100, dtype=float)

    def test_anchor_matching(self):
        """Methods 1 and 2 match the benchmark at every anchor"""
        for kind in (RuleKind.AVG_STEP, RuleKind.AVG_LINEAR):
            residual = residual_subsidy(np.array(MEANS), self.rules[kind], self.benchmark)
            self.assertLessEqual(np.max(np.abs(residual)), 1e-9)

    def test_residual_bound(self):
        """Every rule stays within two percent of the benchmark"""
        for rule in self.rules.values():
            residual = residual_subsidy(self.grid, rule, self.benchmark)
            self.assertLess(np.max(np.abs(residual)), 0.02)

    def test_identical_benchmark(self):
        """A rule equal to the benchmark leaves no residual"""
        rule = self.rules[RuleKind.AVG_LINEAR]
        self.assertEqual(np.max(np.abs(residual_subsidy(self.grid, rule, self.benchmark))), 0.0)

    def test_official_residual(self):
        """The age-only rule subsidizes every anchor by 13 to 16 percent"""
        residual = official_residual(np.array(MEANS), self.benchmark)
        self.assertTrue(np.all((residual > 0.129) & (residual < 0.160)))
        with pytest.raises(DomainError, match="positive"):
            official_residual(1000.0, self.benchmark, 0.0)

    def test_continuous_monotone(self):
        """Methods 2, 3 and 4 give continuous increasing benefits"""
        incomes = np.arange(0.0, 200000.0, 10.0)
        for kind in (RuleKind.AVG_LINEAR, RuleKind.MARGINAL_STEP, RuleKind.MARGINAL_LINEAR):
            values = normalized_benefit(incomes, self.rules[kind])
            steps = np.diff(values)
            self.assertTrue(np.all(steps > 0))
            self.assertLess(np.max(steps), 10.0 / 150.0)

    def test_average_at_zero(self):
        """The average month at zero income is the first marginal month"""
        for kind in (RuleKind.MARGINAL_STEP, RuleKind.MARGINAL_LINEAR):
            rule = self.rules[kind]
            self.assertEqual(average_cm(0.0, rule), rule.values[0])

    def test_implied_marginal_grid(self):
        """Notches give nan, smooth rules a finite month"""
        steps = implied_marginal_grid(np.array([3800.0, 3840.0]), self.rules[RuleKind.AVG_STEP], 10.0)
        self.assertTrue(np.isfinite(steps[0]))
        self.assertTrue(np.isnan(steps[1]))
        linear = implied_marginal_grid(np.array([51499.0]), self.rules[RuleKind.AVG_LINEAR], 100.0)
        self.assertAlmostEqual(linear[0], 163.17, delta=0.05)

    def test_table(self):
        """The dense grid has one row per income and rule"""
        table = evaluation_table(
            list(self.rules.values()), self.benchmark, self.grid, h=100.0, official_month=139.0
        )
        self.assertEqual(len(self.grid), 1196)
        self.assertEqual(table.groupby("method").size().tolist(), [1196] * 4)
        self.assertEqual(
            list(table.columns),
            [
                "method",
                "kind",
                "income",
                "benefit",
                "benefit_per_income",
                "average_cm",
                "marginal_cm",
                "residual_subsidy",
                "implied_marginal_cm",
                "official_residual",
            ],
        )
        np.testing.assert_allclose(
            table["benefit_per_income"], DEFAULT_PHI / table["average_cm"], rtol=1e-12
        )


def _random_anchors(rng) -> FairAnchors:
    start = rng.uniform(150.0, 165.0)
    return FairAnchors(tuple(start + np.concatenate(([0.0], np.cumsum(rng.uniform(-2.0, 3.0, 4))))))


class TestRandomAnchors(unittest.TestCase):
    """Rule properties over randomized anchor sets"""

    def test_calibrated_monotone(self):
        """Calibrated marginal months are weakly increasing and exact when they can be"""
        rng = np.random.default_rng(41)
        for _ in range(200):
            anchors = _random_anchors(rng)
            for calibrate, exact_fn in (
                (method3_calibrate, method3_exact),
                (method4_calibrate, method4_exact),
            ):
                schedule = calibrate(anchors, DEFAULT_QUINTILES)
                self.assertTrue(np.all(np.diff(schedule.values) >= 0.0))
                self.assertGreaterEqual(schedule.objective, 0.0)
                try:
                    exact = exact_fn(anchors, DEFAULT_QUINTILES).deltas
                except InfeasibleScheduleError:
                    continue
                if np.all(np.diff(exact) >= 0.0):
                    self.assertLess(schedule.objective, 1e-12)

    def test_method3_feasibility(self):
        """Feasibility flags mark exactly the falling steps of the exact recursion"""
        rng = np.random.default_rng(43)
        for _ in range(200):
            anchors = _random_anchors(rng)
            steps = method3_feasibility(anchors, DEFAULT_QUINTILES)
            try:
                deltas = method3_exact(anchors, DEFAULT_QUINTILES).deltas
            except InfeasibleScheduleError as ex:
                self.assertEqual((steps[-1].step, steps[-1].side), (ex.bracket, ex.side))
                continue
            expected = [None] + ["upper" if b < a else None for a, b in zip(deltas, deltas[1:])]
            self.assertEqual([step.side for step in steps], expected)

    def test_method4_feasibility(self):
        """Feasibility flags mark exactly the falling knots of the exact recursion"""
        rng = np.random.default_rng(47)
        for _ in range(200):
            anchors = _random_anchors(rng)
            steps = method4_feasibility(anchors, DEFAULT_QUINTILES)
            try:
                deltas = method4_exact(anchors, DEFAULT_QUINTILES).deltas
            except InfeasibleScheduleError as ex:
                self.assertEqual(steps[-1].step, ex.bracket)
                self.assertIsNotNone(steps[-1].side)
                continue
            expected = [None] + ["upper" if b < a else None for a, b in zip(deltas, deltas[1:])]
            self.assertEqual([step.side for step in steps], expected)

    def test_average_rules_match_anchors(self):
        """Methods 1 and 2 leave no residual at any anchor"""
        rng = np.random.default_rng(53)
        for _ in range(200):
            anchors = _random_anchors(rng)
            benchmark = AnchorBenchmark(anchors, DEFAULT_QUINTILES)
            for schedule in (
                method1_schedule(anchors, DEFAULT_QUINTILES),
                method2_schedule(anchors, DEFAULT_QUINTILES),
            ):
                residual = residual_subsidy(np.array(MEANS), schedule, benchmark)
                self.assertLessEqual(np.max(np.abs(residual)), 1e-9)

    def test_step_rule_jumps_at_boundaries(self):
        """The bracket average rule jumps at the boundaries and nowhere else"""
        rng = np.random.default_rng(59)
        grid = np.arange(0.25, 60000.0, 0.5)
        expected = np.searchsorted(grid, DEFAULT_QUINTILES.interior) - 1
        for _ in range(20):
            months = 150.0 + np.cumsum(rng.uniform(0.1, 3.0, 5))
            schedule = method1_schedule(FairAnchors(tuple(months)), DEFAULT_QUINTILES)
            steps = np.diff(normalized_benefit(grid, schedule))
            smooth = 0.5 / average_cm(grid[:-1], schedule)
            jumps = np.flatnonzero(np.abs(steps - smooth) > 1e-9)
            np.testing.assert_array_equal(jumps, expected)
            self.assertTrue(np.all(steps[jumps] < 0.0))

    def test_continuous_increasing(self):
        """Methods 2, 3 and 4 are continuous and strictly increasing"""
        rng = np.random.default_rng(61)
        grid = np.linspace(0.0, 150000.0, 10000)
        for _ in range(200):
            anchors = _random_anchors(rng)
            for schedule in (
                method2_schedule(anchors, DEFAULT_QUINTILES),
                method3_calibrate(anchors, DEFAULT_QUINTILES),
                method4_calibrate(anchors, DEFAULT_QUINTILES),
            ):
                self.assertTrue(np.all(np.diff(normalized_benefit(grid, schedule)) > 0.0))
                for knot in schedule.knots:
                    gap = normalized_benefit(knot + 1e-6, schedule) - normalized_benefit(
                        knot - 1e-6, schedule
                    )
                    self.assertLess(abs(gap), 1e-6)

    def test_method4_marginal_continuous(self):
        """The marginal counting month of method 4 has no jumps"""
        rng = np.random.default_rng(67)
        grid = np.linspace(0.0, 150000.0, 10000)
        for _ in range(200):
            schedule = method4_calibrate(_random_anchors(rng), DEFAULT_QUINTILES)
            for knot in schedule.knots:
                gap = marginal_cm(knot + 1e-6, schedule) - marginal_cm(knot - 1e-6, schedule)
                self.assertLess(abs(gap), 1e-6)
            slopes = np.diff(schedule.values) / np.diff(schedule.knots)
            bound = max(np.max(slopes), 0.0) * (grid[1] - grid[0])
            self.assertLessEqual(np.max(np.diff(marginal_cm(grid, schedule))), bound + 1e-9)
