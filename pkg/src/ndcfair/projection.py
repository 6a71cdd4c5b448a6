"""Random walk with drift for the period index and median projections."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .annuity import (
    OFFICIAL_SCHEDULE,
    AnnuityBasis,
    OfficialSchedule,
    fair_cm_from_rates,
    official_cm,
)
from .exceptions import DomainError
from .hermite import AgeGrid, HermiteSpec
from .national_lc import LCParams
from .random_streams import substream
from .subgroup_fit import period_rates

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class RwdParams:
    """``kappa_{t+1} = kappa_t + drift + sigma Z``."""

    drift: float
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class KappaPaths:
    """Simulated index paths; row ``i`` is path ``i`` for years after ``base_year``."""

    base_year: int
    horizon: int
    n_paths: int
    values: np.ndarray
    seed: int
    base_value: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.shape != (self.n_paths, self.horizon):
            raise DomainError(
                f"paths must have shape ({self.n_paths}, {self.horizon}), got {values.shape}"
            )

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.base_year + 1, self.base_year + self.horizon + 1)


def fit_rwd(kappa) -> RwdParams:
    """Maximum likelihood drift and volatility of a yearly series.

    Raises
    ------
    DomainError
        If the series has fewer than two values.
    """
    kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim != 1 or len(kappa) < 2:
        raise DomainError("a random walk fit needs at least two values")
    steps = np.diff(kappa)
    drift = (kappa[-1] - kappa[0]) / (len(kappa) - 1)
    sigma = float(np.sqrt(np.mean((steps - drift) ** 2)))
    return RwdParams(float(drift), sigma)


def simulate_kappa(params: RwdParams, kappa_base: float, horizon: int, n_paths: int,
                   seed: int, base_year: int = 2020) -> KappaPaths:
    """Simulate index paths; path ``i`` draws from substream ``("kappa-path", i)``."""
    if horizon < 1 or n_paths < 1:
        raise DomainError("horizon and n_paths must be positive")
    values = np.empty((n_paths, horizon))
    for index in range(n_paths):
        shocks = substream(seed, "kappa-path", index).standard_normal(horizon)
        values[index] = kappa_base + np.cumsum(params.drift + params.sigma * shocks)
    return KappaPaths(base_year, horizon, n_paths, values, seed, float(kappa_base))


def lower_median(values, axis: int = 0) -> np.ndarray:
    """Empirical median taking the lower middle value for even counts."""
    ordered = np.sort(np.asarray(values, dtype=float), axis=axis)
    middle = (ordered.shape[axis] - 1) // 2
    return np.take(ordered, middle, axis=axis)


def median_projection(evaluator, paths: KappaPaths) -> np.ndarray:
    """Per-year medians over paths of ``evaluator(year, kappa_values)``.

    ``evaluator`` receives a year and the index values of all paths in that
    year and returns one statistic per path.
    """
    medians = np.empty(paths.horizon)
    for step, year in enumerate(paths.years):
        statistics = np.asarray(evaluator(int(year), paths.values[:, step]), dtype=float)
        if statistics.shape != (paths.n_paths,):
            raise DomainError("the evaluator must return one value per path")
        medians[step] = lower_median(statistics)
    return medians


def project_fair_cm(spec: HermiteSpec, lc: LCParams, paths: KappaPaths, ages=(60, 63),
                    basis: AnnuityBasis = AnnuityBasis(), grid: AgeGrid = AgeGrid(),
                    schedule: OfficialSchedule = OFFICIAL_SCHEDULE) -> pd.DataFrame:
    """Median fair counting months and subsidy rates per year, group and age.

    The base year is evaluated at the fitted index; later years take the
    median over the simulated paths. Columns: ``year, quintile, age,
    m_fair, m_off, subsidy_rate``.
    """
    rows = []
    base_kappa = lc.kappa_at(paths.base_year)
    for j in range(1, spec.groups + 1):
        for age in ages:
            ages_ahead = np.arange(age, grid.x1)
            m_off = official_cm(age, schedule)

            def evaluator(_year, kappas, j=j, ages_ahead=ages_ahead):
                return fair_cm_from_rates(
                    period_rates(spec, lc, j, kappas, grid, ages=ages_ahead), basis
                )

            base = float(evaluator(paths.base_year, np.array([base_kappa]))[0])
            rows.append((paths.base_year, j, age, base, m_off, base / m_off - 1.0))
            for year, median in zip(paths.years, median_projection(evaluator, paths)):
                rows.append((int(year), j, age, float(median), m_off, median / m_off - 1.0))
    _LOGGER.debug("projected %d groups over %d years", spec.groups, paths.horizon)
    frame = pd.DataFrame(
        rows, columns=["year", "quintile", "age", "m_fair", "m_off", "subsidy_rate"]
    )
    return frame.sort_values(["year", "quintile", "age"], kind="stable").reset_index(drop=True)
