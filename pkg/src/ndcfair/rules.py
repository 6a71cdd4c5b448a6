"""Income-dependent annuitization rules.

Four rules convert a notional balance ``phi K`` into a monthly benefit:

* ``AVG_STEP``: a constant average counting month per income bracket,
* ``AVG_LINEAR``: the average counting month interpolated over the quintile means,
* ``MARGINAL_STEP``: a constant marginal counting month per bracket,
* ``MARGINAL_LINEAR``: a marginal counting month interpolated over the means.

All incomes are yearly amounts in 2020 CNY. Brackets are half open,
``(Kbar_{j-1}, Kbar_j]``, with ``K = 0`` in the first bracket.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq, minimize

from .annuity import AnnuityBasis, fair_cm_from_rates
from .exceptions import ConvergenceError, DomainError, InfeasibleScheduleError, NotchError
from .hermite import AgeGrid, HermiteSpec, alpha_curve
from .national_lc import LCParams
from .random_streams import substream
from .subgroup_fit import beta_extended

_LOGGER = logging.getLogger(__name__)

DEFAULT_PHI = 2.4
"""Balance-to-income ratio: 8% contributions over 30 years."""

_CALIBRATION_STARTS = 5
_CALIBRATION_OPTIONS = {"maxiter": 20000, "maxfun": 40000, "ftol": 1e-15, "gtol": 1e-12}


@dataclass(frozen=True)
class IncomeQuintiles:
    """Quintile mean incomes and bracket boundaries.

    ``boundaries`` runs from ``Kbar_0 = 0`` to ``Kbar_J = inf``.
    """

    means: tuple
    boundaries: tuple

    def __post_init__(self):
        means = tuple(float(k) for k in self.means)
        boundaries = tuple(float(k) for k in self.boundaries)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "boundaries", boundaries)
        if len(means) < 1 or len(boundaries) != len(means) + 1:
            raise DomainError("need J means and J + 1 boundaries")
        if boundaries[0] != 0.0 or not np.isinf(boundaries[-1]):
            raise DomainError("boundaries must start at 0 and end at infinity")
        if any(b <= a for a, b in zip(means, means[1:])):
            raise DomainError("quintile means must be strictly increasing")
        if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
            raise DomainError("boundaries must be strictly increasing")
        for j, mean in enumerate(means):
            if not boundaries[j] < mean <= boundaries[j + 1]:
                raise DomainError(f"mean {mean} outside bracket {j + 1}")

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def interior(self) -> np.ndarray:
        """Finite boundaries ``Kbar_1..Kbar_{J-1}``."""
        return np.array(self.boundaries[1:-1])


@dataclass(frozen=True)
class FairAnchors:
    """Fair counting months at the quintile means (age 60, year 2020)."""

    months: tuple

    def __post_init__(self):
        months = tuple(float(m) for m in self.months)
        object.__setattr__(self, "months", months)
        if not months or any(not m > 0 for m in months):
            raise DomainError("anchor counting months must be positive")

    def normalized_benefits(self, quintiles: IncomeQuintiles) -> np.ndarray:
        """``q_j = K_j / M*_j``."""
        if len(self.months) != quintiles.count:
            raise DomainError("one anchor per quintile is needed")
        return np.array(quintiles.means) / np.array(self.months)


DEFAULT_QUINTILES = IncomeQuintiles(
    means=(2181, 6131, 12902, 23897, 51599),
    boundaries=(0, 3847, 8838, 17651, 31300, float("inf")),
)
DEFAULT_ANCHORS = FairAnchors(months=(157.0, 158.1, 158.9, 160.0, 161.1))
"""Fair counting months at age 60 in 2020 for the default quintiles."""


class RuleKind(Enum):
    AVG_STEP = "avg_step"
    AVG_LINEAR = "avg_linear"
    MARGINAL_STEP = "marginal_step"
    MARGINAL_LINEAR = "marginal_linear"

    @property
    def method(self) -> int:
        return list(RuleKind).index(self) + 1


@dataclass(frozen=True)
class RuleSchedule:
    """A calibrated counting-month rule.

    Attributes
    ----------
    kind : RuleKind
        Which of the four rules.
    knots : tuple
        Interior bracket boundaries for the step rules, quintile means for
        the linear rules.
    values : tuple
        Average counting months (``AVG_*``) or marginal ones (``MARGINAL_*``).
    cumulative : tuple
        ``C_0..C_{J-1}`` (normalized benefit at each bracket start) for
        ``MARGINAL_STEP``, ``Y_1..Y_J`` (normalized benefit at each mean)
        for ``MARGINAL_LINEAR``, empty otherwise.
    objective : float
        Calibration objective; zero for the average rules.
    provenance : Mapping
        Anchors the schedule was built from.
    """

    kind: RuleKind
    knots: tuple
    values: tuple
    cumulative: tuple = ()
    objective: float = 0.0
    provenance: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        for name in ("knots", "values", "cumulative"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "provenance", MappingProxyType(dict(self.provenance)))

        step = self.kind in (RuleKind.AVG_STEP, RuleKind.MARGINAL_STEP)
        expected_knots = len(self.values) - 1 if step else len(self.values)
        if len(self.knots) != expected_knots:
            raise DomainError(f"{self.kind.value} needs {expected_knots} knots")
        if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
            raise DomainError("knots must be strictly increasing")
        if any(not v > 0 for v in self.values):
            raise DomainError("counting months must be positive")

        if self.kind in (RuleKind.MARGINAL_STEP, RuleKind.MARGINAL_LINEAR):
            if any(b < a for a, b in zip(self.values, self.values[1:])):
                raise DomainError("marginal counting months must be weakly increasing")
            expected = (
                _method3_cumulative(np.array(self.values), np.array(self.knots))
                if self.kind == RuleKind.MARGINAL_STEP
                else method4_anchor_benefits(np.array(self.values), np.array(self.knots))
            )
            if len(self.cumulative) != len(expected) or not np.allclose(
                self.cumulative, expected, rtol=1e-9, atol=0.0
            ):
                raise DomainError("cumulative benefits inconsistent with the schedule")
        elif self.cumulative:
            raise DomainError("average rules carry no cumulative benefits")


def _provenance(anchors: FairAnchors, quintiles: IncomeQuintiles, source: str) -> dict:
    return {
        "months": list(anchors.months),
        "means": list(quintiles.means),
        "boundaries": list(quintiles.boundaries[1:-1]),
        "source": source,
    }


# continuous fair benchmark

def alpha_continuous(K, x: int, anchors, quintiles: IncomeQuintiles):
    """Log mortality at age ``x`` interpolated over income, clamped at the ends.

    ``anchors`` holds ``alpha_{x,j}`` of every quintile at age ``x``.
    """
    del x  # the anchors are already taken at age x
    anchors = np.asarray(anchors, dtype=float)
    if len(anchors) != quintiles.count:
        raise DomainError("one log mortality value per quintile is needed")
    result = np.interp(np.asarray(K, dtype=float), quintiles.means, anchors)
    return float(result) if np.ndim(result) == 0 else result


class AnchorBenchmark:
    """Fair counting month interpolated linearly over the anchor months."""

    def __init__(self, anchors: FairAnchors, quintiles: IncomeQuintiles):
        self.anchors = anchors
        self.quintiles = quintiles

    def fair_cm(self, K):
        result = np.interp(np.asarray(K, dtype=float), self.quintiles.means, self.anchors.months)
        return float(result) if np.ndim(result) == 0 else result


class MortalityBenchmark:
    """Fair counting month of the income-interpolated mortality curve.

    Parameters
    ----------
    spec : HermiteSpec
        Fitted group baselines, one group per quintile.
    lc : LCParams
        National period effect.
    quintiles : IncomeQuintiles
        Means the baselines are attached to.
    age, year : int
        Retirement age and valuation year.
    basis : AnnuityBasis
        Valuation basis; its limit age must be the grid end.
    grid : AgeGrid
        Age grid of ``spec``.
    """

    def __init__(self, spec: HermiteSpec, lc: LCParams, quintiles: IncomeQuintiles,
                 age: int = 60, year: int = 2020, basis: AnnuityBasis = AnnuityBasis(),
                 grid: AgeGrid = AgeGrid()):
        if spec.groups != quintiles.count:
            raise DomainError(f"{spec.groups} groups for {quintiles.count} quintiles")
        if basis.limit_age != grid.x1:
            raise DomainError("the limit age must equal the age grid end")
        self.quintiles = quintiles
        self.basis = basis
        ages = np.arange(age, grid.x1)
        self._alpha = np.array(
            [alpha_curve(spec, j, ages, grid) for j in range(1, spec.groups + 1)]
        )
        self._period = beta_extended(lc, ages) * lc.kappa_at(year)

    def anchor_months(self) -> FairAnchors:
        """Fair counting months at the quintile means."""
        return FairAnchors(tuple(self.fair_cm(np.array(self.quintiles.means))))

    def fair_cm(self, K):
        scalar = np.ndim(K) == 0
        K = np.atleast_1d(np.asarray(K, dtype=float))
        alpha = np.column_stack(
            [np.interp(K, self.quintiles.means, column) for column in self._alpha.T]
        )
        result = fair_cm_from_rates(np.exp(alpha + self._period), self.basis)
        return float(result[0]) if scalar else result


def fair_cm_continuous(K, benchmark):
    """Continuous fair counting month ``M_fair(K)`` of a benchmark."""
    if np.any(np.asarray(K) < 0):
        raise DomainError("income must be non-negative")
    return benchmark.fair_cm(K)


# average rules

def method1_avg(K, anchors: FairAnchors, quintiles: IncomeQuintiles):
    """Bracket-constant average counting month."""
    bracket = np.searchsorted(quintiles.interior, np.asarray(K, dtype=float), side="left")
    result = np.asarray(anchors.months)[bracket]
    return float(result) if np.ndim(result) == 0 else result


def method2_avg(K, anchors: FairAnchors, quintiles: IncomeQuintiles):
    """Average counting month interpolated over the means, clamped outside."""
    result = np.interp(np.asarray(K, dtype=float), quintiles.means, anchors.months)
    return float(result) if np.ndim(result) == 0 else result


def method2_slope(K, anchors: FairAnchors, quintiles: IncomeQuintiles):
    """Right derivative of :func:`method2_avg`."""
    K = np.asarray(K, dtype=float)
    means = np.array(quintiles.means)
    months = np.array(anchors.months)
    slopes = np.concatenate(([0.0], np.diff(months) / np.diff(means), [0.0]))
    result = slopes[np.searchsorted(means, K, side="right")]
    return float(result) if np.ndim(result) == 0 else result


def implied_marginal(average, K: float, h: float = None, slope=None) -> float:
    """Marginal counting month implied by an average divisor ``M``.

    With ``h`` it is the finite-difference form
    ``h / ((K + h) / M(K + h) - K / M(K))``; otherwise the analytic
    ``M^2 / (M - K M')`` with ``slope`` giving ``M'``.

    Raises
    ------
    NotchError
        If the normalized benefit does not increase.
    """
    if h is not None:
        if not h > 0:
            raise DomainError("the income step must be positive")
        increment = (K + h) / average(K + h) - K / average(K)
        if not increment > 0:
            raise NotchError(f"benefit does not increase between {K} and {K + h}")
        return h / increment
    if slope is None:
        raise DomainError("the analytic form needs the slope of the average divisor")
    level = average(K)
    denominator = level - K * slope(K)
    if not denominator > 0:
        raise NotchError(f"benefit does not increase at {K}")
    return level * level / denominator


# marginal step rule

class Method3Exact(NamedTuple):
    deltas: tuple
    cumulative: tuple


class FeasibilityStep(NamedTuple):
    """One step of an exact anchor-matching recursion.

    ``side`` is ``None`` when ``lower < target <= upper`` holds, otherwise
    the violated bound.
    """

    step: int
    lower: float
    upper: float
    target: float
    side: str


def _method3_cumulative(deltas: np.ndarray, interior: np.ndarray) -> np.ndarray:
    """``C_0..C_{J-1}`` along the last axis of ``deltas``."""
    widths = np.diff(np.concatenate(([0.0], interior)))
    accrued = np.cumsum(widths / deltas[..., :-1], axis=-1)
    zeros = np.zeros(deltas.shape[:-1] + (1,))
    return np.concatenate((zeros, accrued), axis=-1)


def method3_exact(anchors: FairAnchors, quintiles: IncomeQuintiles) -> Method3Exact:
    """Bracket marginal counting months matching every anchor exactly.

    Raises
    ------
    InfeasibleScheduleError
        If the brackets below already deliver the anchor benefit of a bracket.
    """
    q = anchors.normalized_benefits(quintiles)
    bounds = quintiles.boundaries
    deltas = []
    cumulative = [0.0]
    for j in range(quintiles.count):
        remaining = q[j] - cumulative[-1]
        if not remaining > 0:
            raise InfeasibleScheduleError(
                f"anchor benefit {q[j]:.6f} already reached by lower brackets "
                f"({cumulative[-1]:.6f})",
                bracket=j + 1,
                side="lower",
            )
        delta = (quintiles.means[j] - bounds[j]) / remaining
        deltas.append(delta)
        if j < quintiles.count - 1:
            cumulative.append(cumulative[-1] + (bounds[j + 1] - bounds[j]) / delta)
    return Method3Exact(tuple(deltas), tuple(cumulative))


def method3_feasibility(anchors: FairAnchors, quintiles: IncomeQuintiles) -> list:
    """Monotone-feasibility bounds of the exact bracket recursion.

    Step ``j >= 2`` needs ``C_{j-1} < q_j <= C_{j-1} + (K_j - Kbar_{j-1}) / delta_{j-1}``.
    The list stops at the first step whose lower bound fails.
    """
    q = anchors.normalized_benefits(quintiles)
    bounds = quintiles.boundaries
    steps = []
    cumulative = 0.0
    previous = None
    for j in range(quintiles.count):
        reach = quintiles.means[j] - bounds[j]
        upper = np.inf if previous is None else cumulative + reach / previous
        side = None
        if not q[j] > cumulative:
            side = "lower"
        elif q[j] > upper:
            side = "upper"
        steps.append(FeasibilityStep(j + 1, cumulative, float(upper), float(q[j]), side))
        if side == "lower":
            break
        previous = reach / (q[j] - cumulative)
        if j < quintiles.count - 1:
            cumulative += (bounds[j + 1] - bounds[j]) / previous
    return steps


def method3_anchor_benefits(deltas, quintiles: IncomeQuintiles) -> np.ndarray:
    """``Y_{3,j}`` for candidate vectors along the last axis of ``deltas``."""
    deltas = np.asarray(deltas, dtype=float)
    reach = np.array(quintiles.means) - np.array(quintiles.boundaries[:-1])
    return _method3_cumulative(deltas, quintiles.interior) + reach / deltas


def _method3_jacobian(deltas: np.ndarray, quintiles: IncomeQuintiles) -> np.ndarray:
    count = len(deltas)
    widths = np.diff(np.array(quintiles.boundaries[:-1]))
    reach = np.array(quintiles.means) - np.array(quintiles.boundaries[:-1])
    jac = np.zeros((count, count))
    for j in range(count):
        jac[j, :j] = -widths[:j] / deltas[:j] ** 2
        jac[j, j] = -reach[j] / deltas[j] ** 2
    return jac


def calibration_objective(benefits, q) -> np.ndarray:
    """``sum_j (Y_j / q_j - 1)^2`` along the last axis."""
    return np.sum((np.asarray(benefits) / np.asarray(q) - 1.0) ** 2, axis=-1)


def method3_benefit(K, schedule: RuleSchedule):
    """Normalized benefit ``B_3(K) / phi``."""
    _require(schedule, RuleKind.MARGINAL_STEP)
    K = np.asarray(K, dtype=float)
    lower = np.concatenate(([0.0], schedule.knots))
    bracket = np.searchsorted(schedule.knots, K, side="left")
    result = np.array(schedule.cumulative)[bracket] + (K - lower[bracket]) / np.array(
        schedule.values
    )[bracket]
    return float(result) if np.ndim(result) == 0 else result


# marginal linear rule

class Method4Exact(NamedTuple):
    deltas: tuple
    benefits: tuple


def _log_ratio(u):
    """``g(u) = log(1 + u) / u`` and ``g'(u)``, with series near ``u = 0``."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    g = np.where(small, 1.0 - u / 2.0 + u * u / 3.0 - u ** 3 / 4.0, np.log1p(safe) / safe)
    dg = np.where(
        small,
        -0.5 + 2.0 * u / 3.0 - 0.75 * u * u,
        (safe / (1.0 + safe) - np.log1p(safe)) / (safe * safe),
    )
    return g, dg


def segment_integral(a, b, k_lo: float, k_hi: float):
    """``int_{k_lo}^{k_hi} dC / delta(C)`` for ``delta`` linear from ``a`` to ``b``.

    Raises
    ------
    DomainError
        If ``a`` or ``b`` is not positive.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("marginal counting months must be positive")
    g, _ = _log_ratio(b / a - 1.0)
    result = (k_hi - k_lo) / a * g
    return float(result) if np.ndim(result) == 0 else result


def partial_integral(a, b, k_lo: float, k_hi: float, K):
    """``int_{k_lo}^{K} dC / delta(C)`` for ``k_lo <= K <= k_hi``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("marginal counting months must be positive")
    share = (np.asarray(K, dtype=float) - k_lo) / (k_hi - k_lo)
    # delta at K relative to a
    g, _ = _log_ratio((b / a - 1.0) * share)
    result = (np.asarray(K, dtype=float) - k_lo) / a * g
    return float(result) if np.ndim(result) == 0 else result


def method4_exact(anchors: FairAnchors, quintiles: IncomeQuintiles,
                  tolerance: float = 1e-10) -> Method4Exact:
    """Knot values matching every anchor exactly, found step by step.

    ``delta_1 = M*_1``; each next knot solves
    ``segment_integral(delta_j, b) = q_{j+1} - q_j`` on ``[1e-3, 1e3] * delta_j``.

    Raises
    ------
    InfeasibleScheduleError
        If an increment is not positive (``lower``) or its root lies outside
        the bracket.
    """
    q = anchors.normalized_benefits(quintiles)
    means = quintiles.means
    deltas = [float(anchors.months[0])]
    for j in range(quintiles.count - 1):
        increment = q[j + 1] - q[j]
        if not increment > 0:
            raise InfeasibleScheduleError(
                f"anchor benefit does not increase from {q[j]:.6f} to {q[j + 1]:.6f}",
                bracket=j + 2,
                side="lower",
            )
        a = deltas[-1]

        def residual(b, a=a, j=j, increment=increment):
            return segment_integral(a, b, means[j], means[j + 1]) - increment

        lo, hi = 1e-3 * a, 1e3 * a
        at_lo, at_hi = residual(lo), residual(hi)
        if at_lo < 0:
            raise InfeasibleScheduleError(
                f"increment {increment:.6f} needs a knot below {lo:.6g}",
                bracket=j + 2,
                side="upper",
            )
        if at_hi > 0:
            raise InfeasibleScheduleError(
                f"increment {increment:.6f} needs a knot above {hi:.6g}",
                bracket=j + 2,
                side="lower",
            )
        root = brentq(residual, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
        if abs(residual(root)) > tolerance:
            raise ConvergenceError(
                f"knot {j + 2} residual {residual(root):.3e} above {tolerance}",
                last_iterate=root,
                gradient_norm=float("nan"),
            )
        deltas.append(float(root))
    return Method4Exact(tuple(deltas), tuple(float(v) for v in q))


def method4_feasibility(anchors: FairAnchors, quintiles: IncomeQuintiles) -> list:
    """Monotone-feasibility bounds ``0 < q_{j+1} - q_j <= (K_{j+1} - K_j) / delta_j``.

    Uses the exact knots; the list stops at the first step that cannot be solved.
    """
    q = anchors.normalized_benefits(quintiles)
    means = quintiles.means
    steps = [FeasibilityStep(1, 0.0, float("inf"), float(q[0]), None)]
    try:
        deltas = method4_exact(anchors, quintiles).deltas
    except InfeasibleScheduleError as ex:
        deltas = None
        failing = ex.bracket
    for j in range(quintiles.count - 1):
        if deltas is None and j + 2 > failing:
            break
        increment = float(q[j + 1] - q[j])
        if deltas is None and j + 2 == failing:
            steps.append(FeasibilityStep(j + 2, 0.0, float("nan"), increment, "lower"
                                         if increment <= 0 else "upper"))
            break
        upper = (means[j + 1] - means[j]) / deltas[j]
        side = None
        if not increment > 0:
            side = "lower"
        elif increment > upper:
            side = "upper"
        steps.append(FeasibilityStep(j + 2, 0.0, float(upper), increment, side))
    return steps


def method4_anchor_benefits(deltas, means) -> np.ndarray:
    """``Y_{4,j}`` for candidate knot vectors along the last axis of ``deltas``.

    ``means`` are the quintile means, or an :class:`IncomeQuintiles`.
    """
    if isinstance(means, IncomeQuintiles):
        means = means.means
    deltas = np.asarray(deltas, dtype=float)
    means = np.asarray(means, dtype=float)
    a = deltas[..., :-1]
    b = deltas[..., 1:]
    g, _ = _log_ratio(b / a - 1.0)
    increments = np.diff(means) / a * g
    first = means[0] / deltas[..., :1]
    return np.concatenate((first, first + np.cumsum(increments, axis=-1)), axis=-1)


def _method4_jacobian(deltas: np.ndarray, quintiles: IncomeQuintiles) -> np.ndarray:
    count = len(deltas)
    widths = np.diff(np.array(quintiles.means))
    a = deltas[:-1]
    b = deltas[1:]
    u = b / a - 1.0
    g, dg = _log_ratio(u)
    d_b = widths * dg / (a * a)
    d_a = -widths / (a * a) * (g + (1.0 + u) * dg)
    jac = np.zeros((count, count))
    jac[:, 0] = -quintiles.means[0] / deltas[0] ** 2
    for j in range(1, count):
        jac[j] = jac[j - 1]
        jac[j, j - 1] += d_a[j - 1]
        jac[j, j] += d_b[j - 1]
    return jac


def method4_benefit(K, schedule: RuleSchedule):
    """Normalized benefit ``B_4(K) / phi``."""
    _require(schedule, RuleKind.MARGINAL_LINEAR)
    K = np.asarray(K, dtype=float)
    knots = np.array(schedule.knots)
    values = np.array(schedule.values)
    anchor = np.array(schedule.cumulative)
    segment = np.clip(np.searchsorted(knots, K, side="left") - 1, 0, len(knots) - 2)
    inside = partial_integral(
        values[segment], values[segment + 1], knots[segment], knots[segment + 1],
        np.clip(K, knots[segment], knots[segment + 1]),
    )
    result = np.where(
        K <= knots[0],
        K / values[0],
        np.where(
            K > knots[-1],
            anchor[-1] + (K - knots[-1]) / values[-1],
            anchor[segment] + inside,
        ),
    )
    return float(result) if np.ndim(result) == 0 else result


# calibration

def _pool_adjacent_violators(values: np.ndarray) -> np.ndarray:
    """Closest weakly increasing sequence in least squares."""
    blocks = []
    for value in values:
        blocks.append([float(value), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            total, count = blocks.pop()
            blocks[-1][0] = (blocks[-1][0] * blocks[-1][1] + total * count) / (blocks[-1][1] + count)
            blocks[-1][1] += count
    return np.concatenate([np.full(count, value) for value, count in blocks])


def _calibrate_monotone(benefits_fn, jacobian_fn, q: np.ndarray, exact: np.ndarray,
                        scale: float, seed: int) -> tuple:
    """Minimize the proportional anchor error over weakly increasing deltas.

    ``delta = scale * (base + cumsum(increments))`` with ``base > 0`` and
    non-negative increments.
    """
    count = len(q)
    lift = scale * np.tril(np.ones((count, count)))

    def objective(p):
        deltas = lift @ p
        if np.any(deltas <= 0):
            return np.inf, np.zeros_like(p)
        residual = benefits_fn(deltas) / q - 1.0
        gradient = lift.T @ (jacobian_fn(deltas).T @ (2.0 * residual / q))
        return float(residual @ residual), gradient

    def to_free(deltas):
        deltas = _pool_adjacent_violators(np.maximum(deltas, 1e-6 * scale)) / scale
        return np.concatenate(([deltas[0]], np.diff(deltas)))

    starts = [to_free(exact), to_free(np.full(count, exact.mean()))]
    for index in range(2, _CALIBRATION_STARTS):
        noise = substream(seed, "calibration-start", index).normal(scale=0.01, size=count)
        starts.append(to_free(exact * (1.0 + noise)))

    bounds = [(1e-8, None)] + [(0.0, None)] * (count - 1)
    best = None
    for index, start in enumerate(starts):
        result = minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options=_CALIBRATION_OPTIONS,
        )
        _LOGGER.debug("calibration start %d: objective %.3e (%s)", index, result.fun, result.message)
        if best is None or result.fun < best.fun:
            best = result
    if not np.isfinite(best.fun):
        raise ConvergenceError(
            f"calibration failed: {best.message}",
            last_iterate=lift @ best.x,
            gradient_norm=float(np.linalg.norm(best.jac)),
            iterations=int(best.nit),
        )
    # cumulative sums keep the knots weakly increasing
    deltas = scale * (best.x[0] + np.concatenate(([0.0], np.cumsum(best.x[1:]))))
    return deltas, float(best.fun)


def _exact_or_anchors(exact_fn, anchors: FairAnchors, quintiles: IncomeQuintiles) -> np.ndarray:
    try:
        return np.array(exact_fn(anchors, quintiles).deltas)
    except InfeasibleScheduleError as ex:
        _LOGGER.info("exact recursion infeasible (%s), starting from the anchors", ex)
        return np.array(anchors.months)


def method1_schedule(anchors: FairAnchors, quintiles: IncomeQuintiles,
                     source: str = "anchors") -> RuleSchedule:
    """Method 1 as a schedule: anchor months per bracket."""
    return RuleSchedule(
        RuleKind.AVG_STEP, tuple(quintiles.interior), anchors.months,
        provenance=_provenance(anchors, quintiles, source),
    )


def method2_schedule(anchors: FairAnchors, quintiles: IncomeQuintiles,
                     source: str = "anchors") -> RuleSchedule:
    """Method 2 as a schedule: anchor months at the means."""
    return RuleSchedule(
        RuleKind.AVG_LINEAR, quintiles.means, anchors.months,
        provenance=_provenance(anchors, quintiles, source),
    )


def method3_calibrate(anchors: FairAnchors, quintiles: IncomeQuintiles,
                      source: str = "anchors", seed: int = 0) -> RuleSchedule:
    """Closest weakly increasing bracket marginal counting months.

    Raises
    ------
    ConvergenceError
        If no start reaches a finite objective.
    """
    q = anchors.normalized_benefits(quintiles)
    deltas, objective = _calibrate_monotone(
        lambda d: method3_anchor_benefits(d, quintiles),
        lambda d: _method3_jacobian(d, quintiles),
        q,
        _exact_or_anchors(method3_exact, anchors, quintiles),
        float(np.mean(anchors.months)),
        seed,
    )
    _LOGGER.info("marginal step rule calibrated, objective %.3e", objective)
    return RuleSchedule(
        RuleKind.MARGINAL_STEP,
        tuple(quintiles.interior),
        tuple(deltas),
        tuple(_method3_cumulative(deltas, quintiles.interior)),
        objective,
        _provenance(anchors, quintiles, source),
    )


def method4_calibrate(anchors: FairAnchors, quintiles: IncomeQuintiles,
                      source: str = "anchors", seed: int = 0) -> RuleSchedule:
    """Closest weakly increasing piecewise-linear marginal counting months.

    Raises
    ------
    ConvergenceError
        If no start reaches a finite objective.
    """
    q = anchors.normalized_benefits(quintiles)
    deltas, objective = _calibrate_monotone(
        lambda d: method4_anchor_benefits(d, quintiles),
        lambda d: _method4_jacobian(d, quintiles),
        q,
        _exact_or_anchors(method4_exact, anchors, quintiles),
        float(np.mean(anchors.months)),
        seed,
    )
    _LOGGER.info("marginal linear rule calibrated, objective %.3e", objective)
    return RuleSchedule(
        RuleKind.MARGINAL_LINEAR,
        quintiles.means,
        tuple(deltas),
        tuple(method4_anchor_benefits(deltas, quintiles)),
        objective,
        _provenance(anchors, quintiles, source),
    )


def calibrate_all(anchors: FairAnchors, quintiles: IncomeQuintiles, source: str = "anchors",
                  seed: int = 0) -> dict:
    """All four schedules keyed by kind."""
    return {
        RuleKind.AVG_STEP: method1_schedule(anchors, quintiles, source),
        RuleKind.AVG_LINEAR: method2_schedule(anchors, quintiles, source),
        RuleKind.MARGINAL_STEP: method3_calibrate(anchors, quintiles, source, seed),
        RuleKind.MARGINAL_LINEAR: method4_calibrate(anchors, quintiles, source, seed),
    }


# evaluation

def _require(schedule: RuleSchedule, kind: RuleKind):
    if schedule.kind != kind:
        raise DomainError(f"expected a {kind.value} schedule, got {schedule.kind.value}")


def normalized_benefit(K, rule: RuleSchedule):
    """``B_m(K) / phi``."""
    if rule.kind == RuleKind.MARGINAL_STEP:
        return method3_benefit(K, rule)
    if rule.kind == RuleKind.MARGINAL_LINEAR:
        return method4_benefit(K, rule)
    result = np.asarray(K, dtype=float) / average_cm(K, rule)
    return float(result) if np.ndim(result) == 0 else result


def average_cm(K, rule: RuleSchedule):
    """Average counting month ``M_m(K) = phi K / B_m(K)``; its limit at ``K = 0``."""
    K = np.asarray(K, dtype=float)
    values = np.array(rule.values)
    if rule.kind == RuleKind.AVG_STEP:
        result = values[np.searchsorted(rule.knots, K, side="left")]
    elif rule.kind == RuleKind.AVG_LINEAR:
        result = np.interp(K, rule.knots, values)
    else:
        benefit_ = np.asarray(normalized_benefit(K, rule), dtype=float)
        result = np.divide(K, benefit_, out=np.full(K.shape, values[0]), where=K > 0)
    return float(result) if np.ndim(result) == 0 else result


def marginal_cm(K, rule: RuleSchedule):
    """Marginal counting month ``[d(B/phi)/dK]^-1`` from the right."""
    K = np.asarray(K, dtype=float)
    values = np.array(rule.values)
    knots = np.array(rule.knots)
    if rule.kind == RuleKind.AVG_STEP:
        result = values[np.searchsorted(knots, K, side="right")]
    elif rule.kind == RuleKind.MARGINAL_STEP:
        result = values[np.searchsorted(knots, K, side="right")]
    elif rule.kind == RuleKind.MARGINAL_LINEAR:
        result = np.interp(K, knots, values)
    else:
        slopes = np.concatenate(([0.0], np.diff(values) / np.diff(knots), [0.0]))
        slope = slopes[np.searchsorted(knots, K, side="right")]
        level = np.interp(K, knots, values)
        result = level * level / (level - K * slope)
    return float(result) if np.ndim(result) == 0 else result


def benefit(K, rule: RuleSchedule, phi: float = DEFAULT_PHI):
    """Monthly benefit in CNY of a yearly income ``K``."""
    if not phi > 0:
        raise DomainError(f"phi must be positive, got {phi}")
    if np.any(np.asarray(K) < 0):
        raise DomainError("income must be non-negative")
    result = phi * np.asarray(normalized_benefit(K, rule))
    return float(result) if np.ndim(result) == 0 else result


def residual_subsidy(K, rule: RuleSchedule, benchmark):
    """``M_fair(K) / M_m(K) - 1``."""
    result = np.asarray(benchmark.fair_cm(K)) / np.asarray(average_cm(K, rule)) - 1.0
    return float(result) if np.ndim(result) == 0 else result


def official_residual(K, benchmark, official_month: float = 139.0):
    """Subsidy of the age-only rule: ``M_fair(K) / M_off - 1``."""
    if not official_month > 0:
        raise DomainError("official counting month must be positive")
    result = np.asarray(benchmark.fair_cm(K)) / official_month - 1.0
    return float(result) if np.ndim(result) == 0 else result


def implied_marginal_grid(K, rule: RuleSchedule, h: float):
    """Finite-difference marginal counting months over ``[K, K + h]``.

    Steps where the benefit does not increase give ``nan``.
    """
    if not h > 0:
        raise DomainError("the income step must be positive")
    K = np.asarray(K, dtype=float)
    increment = np.asarray(normalized_benefit(K + h, rule)) - np.asarray(normalized_benefit(K, rule))
    safe = np.where(increment > 0, increment, 1.0)
    return np.where(increment > 0, h / safe, np.nan)


def evaluation_table(rules, benchmark, incomes, phi: float = DEFAULT_PHI,
                     h: float = None, official_month: float = None) -> pd.DataFrame:
    """Dense-grid evaluation of every rule.

    Columns: ``method, kind, income, benefit, benefit_per_income,
    average_cm, marginal_cm, residual_subsidy``, plus ``implied_marginal_cm``
    with a step ``h`` and ``official_residual`` with an official month.
    """
    incomes = np.asarray(incomes, dtype=float)
    frames = []
    for rule in rules:
        benefits = benefit(incomes, rule, phi)
        columns = {
            "method": rule.kind.method,
            "kind": rule.kind.value,
            "income": incomes,
            "benefit": benefits,
            "benefit_per_income": benefits / incomes,
            "average_cm": average_cm(incomes, rule),
            "marginal_cm": marginal_cm(incomes, rule),
            "residual_subsidy": residual_subsidy(incomes, rule, benchmark),
        }
        if h is not None:
            columns["implied_marginal_cm"] = implied_marginal_grid(incomes, rule, h)
        if official_month is not None:
            columns["official_residual"] = official_residual(incomes, benchmark, official_month)
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)
