"""Period life tables, monthly annuity-due values and counting months."""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from types import MappingProxyType

import numpy as np
import pandas as pd

from .exceptions import DomainError
from .hermite import AgeGrid, HermiteSpec
from .national_lc import LCParams
from .subgroup_fit import period_rates

_LOGGER = logging.getLogger(__name__)

MONTHS = 12


class FractionalAge(Enum):
    """Survival assumption within an age-year."""

    CONSTANT_FORCE = "constant_force"


@dataclass(frozen=True)
class AnnuityBasis:
    """Valuation basis: annual effective rate ``r`` and the limiting age.

    ``r`` may be ``inf``, giving ``v = 0``.
    """

    r: float = 0.07
    limit_age: int = 120
    fractional_age: FractionalAge = FractionalAge.CONSTANT_FORCE

    def __post_init__(self):
        if not self.r > -1.0:
            raise DomainError(f"discount rate must exceed -1, got {self.r}")
        if int(self.limit_age) != self.limit_age or self.limit_age <= 0:
            raise DomainError(f"limit age must be a positive integer, got {self.limit_age}")

    @property
    def v(self) -> float:
        """Annual discount factor ``(1 + r)^-1``."""
        return 0.0 if np.isinf(self.r) else 1.0 / (1.0 + self.r)

    def monthly_discounts(self, months: int) -> np.ndarray:
        """``v^(m/12)`` for ``m = 0..months``."""
        exponents = np.arange(months + 1) / MONTHS
        return np.power(self.v, exponents)


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Monthly survival probabilities ``p(m/12)`` up to the limit age.

    ``probabilities[0] == 1``, non-increasing, non-negative and zero at the
    last entry.
    """

    probabilities: np.ndarray
    age: int = None

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=float, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)
        if p.ndim != 1 or len(p) < 2:
            raise DomainError("a survival curve needs at least two monthly points")
        if p[0] != 1.0:
            raise DomainError("survival at month 0 must be 1")
        if np.any(p < 0) or np.any(np.diff(p) > 0):
            raise DomainError("survival must be non-negative and non-increasing")
        if p[-1] != 0.0:
            raise DomainError("survival at the limit age must be 0")

    @property
    def months(self) -> int:
        return len(self.probabilities) - 1


def survival_matrix(rates, months: int = None) -> np.ndarray:
    """Constant-force monthly survival for yearly rates along the last axis.

    Returns an array with ``12 n + 1`` entries on the last axis, forced to 0
    at the end.
    """
    rates = np.asarray(rates, dtype=float)
    monthly_hazard = np.repeat(rates / MONTHS, MONTHS, axis=-1)
    cumulative = np.cumsum(monthly_hazard, axis=-1)
    zeros = np.zeros(rates.shape[:-1] + (1,))
    survival = np.exp(-np.concatenate((zeros, cumulative), axis=-1))
    survival[..., -1] = 0.0
    return survival


def survival_from_rates(rates, basis: AnnuityBasis = AnnuityBasis(), age: int = None) -> SurvivalCurve:
    """Period survival curve from central death rates at integer ages.

    Parameters
    ----------
    rates : sequence of float
        ``m`` at ages ``age, age + 1, ...``; at least up to ``limit_age - 1``.
    basis : AnnuityBasis
        Supplies the limit age.
    age : int | None
        Starting age. Without it the rates are taken to end at the limit age.

    Raises
    ------
    DomainError
        If a rate before the limit age is missing, negative or not finite.
    """
    rates = np.asarray(rates, dtype=float)
    if age is None:
        age = basis.limit_age - len(rates)
    years = basis.limit_age - age
    if years < 1:
        raise DomainError(f"age {age} is not below the limit age {basis.limit_age}")
    if len(rates) < years:
        raise DomainError(
            f"missing rate at age {age + len(rates)} before the limit age {basis.limit_age}"
        )
    rates = rates[:years]
    if not np.all(np.isfinite(rates)):
        first = int(np.flatnonzero(~np.isfinite(rates))[0])
        raise DomainError(f"missing rate at age {age + first}")
    if np.any(rates < 0):
        raise DomainError("death rates must be non-negative")
    return SurvivalCurve(survival_matrix(rates), age)


def annuity_factors(probabilities, basis: AnnuityBasis = AnnuityBasis()) -> np.ndarray:
    """Vectorized ``(1/12) sum v^(m/12) p(m/12)`` along the last axis."""
    probabilities = np.asarray(probabilities, dtype=float)
    discounts = basis.monthly_discounts(probabilities.shape[-1] - 1)
    return probabilities @ discounts / MONTHS


def annuity_monthly(curve: SurvivalCurve, basis: AnnuityBasis = AnnuityBasis()) -> float:
    """Monthly annuity-due value of 1 per year, in years."""
    return float(annuity_factors(curve.probabilities, basis))


def fair_cm(curve: SurvivalCurve, basis: AnnuityBasis = AnnuityBasis()) -> float:
    """Actuarially fair counting month ``12 * annuity_monthly``."""
    return MONTHS * annuity_monthly(curve, basis)


def fair_cm_from_rates(rates, basis: AnnuityBasis = AnnuityBasis()) -> np.ndarray:
    """Fair counting months for rows of yearly rates ending at the limit age."""
    return MONTHS * annuity_factors(survival_matrix(rates), basis)


def subsidy(m_fair: float, m_off: float) -> float:
    """Subsidy rate ``M_fair / M_off - 1``."""
    if not m_off > 0:
        raise DomainError(f"official counting month must be positive, got {m_off}")
    return m_fair / m_off - 1.0


def format_percent(rate: float) -> float:
    """Round a rate half away from zero to 4 decimals, then as percent to 1.

    Only used for tabulated output; computations keep the unrounded rate.
    """
    four = Decimal(repr(float(rate))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)
    return float((four * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class OfficialSchedule:
    """Official counting months by retirement age."""

    version: str
    months: MappingProxyType = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "months", MappingProxyType(dict(self.months)))
        values = [self.months[age] for age in sorted(self.months)]
        if any(later >= earlier for earlier, later in zip(values, values[1:])):
            raise DomainError("official counting months must decrease with age")

    def lookup(self, age: int) -> int:
        if age not in self.months:
            raise DomainError(
                f"no official counting month for age {age}, "
                f"table covers {min(self.months)}..{max(self.months)}"
            )
        return self.months[age]

    def to_frame(self) -> pd.DataFrame:
        """The table as ``age, counting_month`` rows."""
        ages = sorted(self.months)
        return pd.DataFrame(
            {"age": ages, "counting_month": [self.months[a] for a in ages]}
        )


OFFICIAL_SCHEDULE = OfficialSchedule(
    version="2006",
    months={
        40: 233, 41: 230, 42: 226, 43: 223, 44: 220,
        45: 216, 46: 212, 47: 207, 48: 204, 49: 199,
        50: 195, 51: 190, 52: 185, 53: 180, 54: 175,
        55: 170, 56: 164, 57: 158, 58: 152, 59: 145,
        60: 139, 61: 132, 62: 125, 63: 117, 64: 109,
        65: 101, 66: 93, 67: 84, 68: 75, 69: 65,
        70: 56,
    },
)
"""Counting months of the individual-account rule in force since 2006."""


def official_cm(age: int, schedule: OfficialSchedule = OFFICIAL_SCHEDULE) -> int:
    """Official counting month at a retirement age between 40 and 70."""
    return schedule.lookup(age)


def annuity_gap(curve_hi: SurvivalCurve, curve_lo: SurvivalCurve, r: float) -> float:
    """Annuity-factor gap ``a(curve_hi) - a(curve_lo)`` at rate ``r``.

    Raises
    ------
    DomainError
        If the curves differ in length or ``curve_hi`` is below ``curve_lo``
        at some month.
    """
    hi = curve_hi.probabilities
    lo = curve_lo.probabilities
    if hi.shape != lo.shape:
        raise DomainError("curves must cover the same months")
    violating = np.flatnonzero(hi < lo - 1e-15)
    if len(violating):
        raise DomainError(
            f"survival dominance violated at month {int(violating[0])}"
        )
    return float(annuity_factors(np.maximum(hi - lo, 0.0), AnnuityBasis(r=r)))


def fair_cm_table(spec: HermiteSpec, lc: LCParams, t: int, ages=(60, 63),
                  basis: AnnuityBasis = AnnuityBasis(), grid: AgeGrid = AgeGrid(),
                  schedule: OfficialSchedule = OFFICIAL_SCHEDULE) -> pd.DataFrame:
    """Fair and official counting months with subsidy rates per group and age.

    Columns: ``quintile, age, m_fair, m_off, subsidy_rate, subsidy_percent``.
    """
    if basis.limit_age != grid.x1:
        raise DomainError(f"limit age {basis.limit_age} differs from the age grid end {grid.x1}")
    kappa = lc.kappa_at(t)
    rows = []
    for j in range(1, spec.groups + 1):
        for age in ages:
            rates = period_rates(spec, lc, j, kappa, grid, ages=np.arange(age, grid.x1))
            m_fair = float(fair_cm_from_rates(rates, basis))
            m_off = official_cm(age, schedule)
            rate = subsidy(m_fair, m_off)
            rows.append((j, age, m_fair, m_off, rate, format_percent(rate)))
    _LOGGER.debug("fair counting months for %d groups at %d ages", spec.groups, len(ages))
    return pd.DataFrame(
        rows,
        columns=["quintile", "age", "m_fair", "m_off", "subsidy_rate", "subsidy_percent"],
    )
