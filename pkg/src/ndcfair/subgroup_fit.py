"""LC-adjusted pooling of the subgroup panel and shape-constrained Hermite fits.

Conditional on the national ``beta`` and ``kappa``, the multi-wave subgroup
cells are pooled into one cross-section at the reference year and the grouped
Hermite baseline is fitted to it by Poisson maximum likelihood.
"""

import logging
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import gammaln

from .exceptions import ConvergenceError, DomainError
from .hermite import (
    AgeGrid,
    HermiteSpec,
    HermiteVariant,
    alpha_curve,
    alpha_eval,
    gompertz_fit,
    hermite_basis_array,
    parameter_count,
    shared_layout,
)
from .national_lc import LCParams
from .random_streams import substream

_LOGGER = logging.getLogger(__name__)

DEFAULT_WAVES = MappingProxyType({2011: 2, 2013: 2, 2015: 3, 2018: 2})
"""Survey waves and the length in years of the interval each one opens."""

_START_COUNT = 5
_MAX_ITER = 50000


@dataclass(frozen=True, eq=False)
class SubgroupPanel:
    """Interval deaths and exposure by age, group and starting wave.

    Attributes
    ----------
    ages, groups, waves_of_rows : numpy.ndarray
        Cell keys, one entry per row.
    exposure : numpy.ndarray
        Exposure proxy ``l`` (persons alive at the wave).
    deaths : numpy.ndarray
        Deaths ``d`` during the interval opened by the wave, ``d <= l``.
    waves : Mapping
        Interval length in years of every wave.
    """

    ages: np.ndarray
    groups: np.ndarray
    waves_of_rows: np.ndarray
    exposure: np.ndarray
    deaths: np.ndarray
    waves: MappingProxyType = field(default=DEFAULT_WAVES)

    def __post_init__(self):
        for name, dtype in (
            ("ages", int),
            ("groups", int),
            ("waves_of_rows", int),
            ("exposure", float),
            ("deaths", float),
        ):
            array = np.array(getattr(self, name), dtype=dtype, copy=True)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(
            self, "waves", MappingProxyType({int(k): float(v) for k, v in self.waves.items()})
        )

        count = len(self.ages)
        for name in ("groups", "waves_of_rows", "exposure", "deaths"):
            if getattr(self, name).shape != (count,):
                raise DomainError(f"{name} must have one entry per row")
        for wave, length in self.waves.items():
            if not length > 0:
                raise DomainError(f"wave {wave} needs a positive interval length")
        unknown = sorted(set(self.waves_of_rows.tolist()) - set(self.waves))
        if unknown:
            raise DomainError(f"no interval length configured for wave {unknown[0]}")
        if np.any(self.groups < 1):
            raise DomainError("groups are numbered from 1")
        if not np.all(np.isfinite(self.exposure)) or not np.all(np.isfinite(self.deaths)):
            raise DomainError("exposure and deaths must be finite")
        if np.any(self.exposure < 0) or np.any(self.deaths < 0):
            raise DomainError("exposure and deaths must be non-negative")
        if np.any(self.deaths > self.exposure):
            raise DomainError("deaths exceed exposure")
        keys = pd.DataFrame(
            {"age": self.ages, "group": self.groups, "wave": self.waves_of_rows}
        )
        if keys.duplicated().any():
            row = keys[keys.duplicated()].iloc[0]
            raise DomainError(
                f"duplicate cell age {row.age}, group {row.group}, wave {row.wave}"
            )

    @property
    def group_count(self) -> int:
        return int(self.groups.max()) if len(self.groups) else 0

    def interval_lengths(self) -> np.ndarray:
        """``Delta`` of every row."""
        return np.array([self.waves[w] for w in self.waves_of_rows], dtype=float)

    def annualized_deaths(self) -> np.ndarray:
        """``d / Delta`` of every row."""
        return self.deaths / self.interval_lengths()


@dataclass(frozen=True)
class PooledCell:
    """One age x group cell of the pooled cross-section."""

    x: int
    j: int
    d_pool: float
    e_eff: float

    def __post_init__(self):
        if not self.d_pool >= 0 or not self.e_eff >= 0:
            raise DomainError(f"pooled cell ({self.x}, {self.j}) has negative deaths or exposure")


@dataclass(frozen=True)
class ShapeConstraints:
    """Active shape restrictions of the grouped Hermite fit.

    Attributes
    ----------
    theta_monotone : bool
        ``theta_{j+1} <= theta_j``.
    mu0_monotone_nonneg : bool
        ``0 <= mu0_j <= mu0_{j+1}``.
    non_crossover : bool
        ``mu0_{j+1} - mu0_j <= -3 (theta_{j+1} - theta_j)``, plus
        ``omega_{j+1} <= omega_j`` when ``omega`` is group-specific.
    """

    theta_monotone: bool = True
    mu0_monotone_nonneg: bool = True
    non_crossover: bool = True


@dataclass(frozen=True)
class HsmFitReport:
    """Diagnostics of :func:`fit_hsm`."""

    q: float
    log_likelihood: float
    n_cells: int
    k: int
    dropped: int
    start_q: tuple
    iterations: int
    converged: bool
    message: str


def build_pooled(panel: SubgroupPanel, lc: LCParams) -> list:
    """Pool the waves of every (age, group) cell at the reference year.

    ``D_pool = sum_y d / Delta_y`` and ``E_eff = sum_y l exp(beta_x kappa_y)``
    with ``kappa_y`` the national index of the year the wave starts.

    Raises
    ------
    DomainError
        If a wave year is missing from ``kappa`` or an age from ``beta``.
    """
    for wave in sorted(set(panel.waves_of_rows.tolist())):
        if not lc.years[0] <= wave <= lc.years[-1]:
            raise DomainError(f"wave {wave} has no kappa in {lc.years[0]}..{lc.years[-1]}")
    for age in sorted(set(panel.ages.tolist())):
        if not lc.ages[0] <= age <= lc.ages[-1]:
            raise DomainError(f"age {age} has no beta in {lc.ages[0]}..{lc.ages[-1]}")

    beta = lc.beta[panel.ages - lc.ages[0]]
    kappa = lc.kappa[panel.waves_of_rows - lc.years[0]]
    frame = pd.DataFrame(
        {
            "x": panel.ages,
            "j": panel.groups,
            "d_pool": panel.annualized_deaths(),
            "e_eff": panel.exposure * np.exp(beta * kappa),
        }
    )
    pooled = frame.groupby(["j", "x"], sort=True)[["d_pool", "e_eff"]].sum()
    return [
        PooledCell(int(x), int(j), float(row.d_pool), float(row.e_eff))
        for (j, x), row in pooled.iterrows()
    ]


def _included(cells) -> list:
    return [cell for cell in cells if cell.e_eff > 0]


def q_objective(spec: HermiteSpec, cells, grid: AgeGrid = AgeGrid()) -> float:
    """``Q = sum [D_pool alpha - E_eff exp(alpha)]`` over cells with exposure."""
    total = 0.0
    for cell in _included(cells):
        alpha = alpha_eval(spec, cell.j, cell.x, grid)
        total += cell.d_pool * alpha - cell.e_eff * np.exp(alpha)
    return total


def poisson_log_likelihood(spec: HermiteSpec, cells, grid: AgeGrid = AgeGrid()) -> float:
    """Full Poisson log-likelihood of the pooled cells, log-factorial terms included."""
    total = 0.0
    for cell in _included(cells):
        rate = cell.e_eff * np.exp(alpha_eval(spec, cell.j, cell.x, grid))
        total += cell.d_pool * np.log(rate) - rate - gammaln(cell.d_pool + 1.0)
    return float(total)


def information_criteria(log_likelihood: float, k: int, n: int) -> tuple:
    """Return ``(AIC, BIC)`` for ``k`` free parameters and ``n`` observations."""
    if n < 1:
        raise DomainError("information criteria need at least one observation")
    aic = 2.0 * k - 2.0 * log_likelihood
    bic = k * np.log(n) - 2.0 * log_likelihood
    return aic, float(bic)


def model_scores(report: HsmFitReport, cells=None) -> tuple:
    """``(AIC, BIC)`` of a fit; ``n`` counts the cells with positive exposure."""
    n = len(_included(cells)) if cells is not None else report.n_cells
    return information_criteria(report.log_likelihood, report.k, n)


class _Parameterization:
    """Bounded free parameters ``p`` mapped onto Hermite coefficients ``c``.

    ``c`` is ordered ``theta (J), omega (J or 1), mu0 (J or 1), mu1 (1)``
    and ``p`` has the same blocks. Ordered blocks are a free first value
    followed by non-negative decrements; with both the monotone and the
    non-crossover restriction, ``mu0`` increments are ``3 s_j lambda_j``
    with ``s_j`` the ``theta`` decrement and ``lambda_j`` in ``[0, 1]``.
    """

    def __init__(self, variant: HermiteVariant, constraints: ShapeConstraints, groups: int):
        omega_shared, mu0_shared, _ = shared_layout(variant)
        self.groups = groups
        self.n_omega = 1 if omega_shared else groups
        self.n_mu0 = 1 if mu0_shared else groups
        self.size = groups + self.n_omega + self.n_mu0 + 1
        self.theta_slice = slice(0, groups)
        self.omega_slice = slice(groups, groups + self.n_omega)
        self.mu0_slice = slice(groups + self.n_omega, groups + self.n_omega + self.n_mu0)

        monotone = constraints.mu0_monotone_nonneg
        crossing = constraints.non_crossover
        self.theta_ordered = constraints.theta_monotone or (crossing and (mu0_shared or monotone))
        self.omega_ordered = crossing and not omega_shared
        if mu0_shared:
            self.mu0_mode = "shared"
        elif monotone and crossing:
            self.mu0_mode = "bounded"
        elif monotone:
            self.mu0_mode = "monotone"
        elif crossing:
            self.mu0_mode = "crossing"
        else:
            self.mu0_mode = "free"
        self.mu0_nonneg = monotone

    @staticmethod
    def _ordered(first_and_decrements: np.ndarray) -> tuple:
        n = len(first_and_decrements)
        values = first_and_decrements[0] - np.concatenate(
            ([0.0], np.cumsum(first_and_decrements[1:]))
        )
        jac = np.tril(-np.ones((n, n)))
        jac[:, 0] = 1.0
        return values, jac

    def bounds(self) -> list:
        def ordered(n):
            return [(None, None)] + [(0.0, None)] * (n - 1)

        result = ordered(self.groups) if self.theta_ordered else [(None, None)] * self.groups
        result += ordered(self.n_omega) if self.omega_ordered else [(None, None)] * self.n_omega
        first = (0.0, None) if self.mu0_nonneg else (None, None)
        if self.mu0_mode == "shared":
            result += [first]
        elif self.mu0_mode == "bounded":
            result += [first] + [(0.0, 1.0)] * (self.groups - 1)
        elif self.mu0_mode == "monotone":
            result += [first] + [(0.0, None)] * (self.groups - 1)
        elif self.mu0_mode == "crossing":
            result += [(None, None)] + [(0.0, None)] * (self.groups - 1)
        else:
            result += [(None, None)] * self.groups
        return result + [(None, None)]

    def expand(self, p: np.ndarray) -> tuple:
        """Return ``(c, dc/dp)``."""
        c = np.empty(self.size)
        jac = np.zeros((self.size, self.size))
        ts, ws, ms = self.theta_slice, self.omega_slice, self.mu0_slice

        if self.theta_ordered:
            c[ts], jac[ts, ts] = self._ordered(p[ts])
        else:
            c[ts], jac[ts, ts] = p[ts], np.eye(self.groups)

        if self.omega_ordered:
            c[ws], jac[ws, ws] = self._ordered(p[ws])
        else:
            c[ws], jac[ws, ws] = p[ws], np.eye(self.n_omega)

        q = p[ms]
        first = ms.start
        if self.mu0_mode in ("shared", "free"):
            c[ms], jac[ms, ms] = q, np.eye(self.n_mu0)
        elif self.mu0_mode == "monotone":
            c[ms] = q[0] + np.concatenate(([0.0], np.cumsum(q[1:])))
            jac[ms, ms] = np.tril(np.ones((self.groups, self.groups)))
        elif self.mu0_mode == "bounded":
            decrements = p[ts][1:]
            increments = 3.0 * decrements * q[1:]
            c[ms] = q[0] + np.concatenate(([0.0], np.cumsum(increments)))
            for j in range(self.groups):
                jac[first + j, first] = 1.0
                for k in range(1, j + 1):
                    jac[first + j, first + k] = 3.0 * decrements[k - 1]
                    jac[first + j, ts.start + k] = 3.0 * q[k]
        else:
            # mu0_j = mu0_1 + 3 (theta_1 - theta_j) - sum of slack
            theta = c[ts]
            c[ms] = q[0] + 3.0 * (theta[0] - theta) - np.concatenate(([0.0], np.cumsum(q[1:])))
            jac[ms, ms] = -np.tril(np.ones((self.groups, self.groups)))
            jac[ms, first] = 1.0
            jac[ms, ts] = 3.0 * (jac[ts, ts][0][None, :] - jac[ts, ts])

        c[-1] = p[-1]
        jac[-1, -1] = 1.0
        return c, jac

    def project(self, c: np.ndarray) -> np.ndarray:
        """Free parameters of the feasible point next to the coefficients ``c``."""
        p = np.empty(self.size)
        ts, ws, ms = self.theta_slice, self.omega_slice, self.mu0_slice

        def ordered(values):
            values = np.minimum.accumulate(values)
            return np.concatenate(([values[0]], -np.diff(values)))

        theta = np.minimum.accumulate(c[ts]) if self.theta_ordered else c[ts]
        p[ts] = ordered(theta) if self.theta_ordered else theta
        p[ws] = ordered(c[ws]) if self.omega_ordered else c[ws]

        mu0 = c[ms]
        lowest = max(mu0[0], 0.0) if self.mu0_nonneg else mu0[0]
        if self.mu0_mode in ("shared", "free"):
            p[ms] = mu0
            if self.mu0_nonneg:
                p[ms] = np.maximum(mu0, 0.0)
        elif self.mu0_mode == "monotone":
            p[ms] = np.concatenate(([lowest], np.maximum(np.diff(mu0), 0.0)))
        elif self.mu0_mode == "bounded":
            room = 3.0 * -np.diff(theta)
            wanted = np.maximum(np.diff(mu0), 0.0)
            share = np.divide(wanted, room, out=np.zeros_like(room), where=room > 0)
            p[ms] = np.concatenate(([lowest], np.clip(share, 0.0, 1.0)))
        else:
            room = 3.0 * -np.diff(theta)
            p[ms] = np.concatenate(([mu0[0]], np.maximum(room - np.diff(mu0), 0.0)))
        p[-1] = c[-1]
        return p

    def clip(self, p: np.ndarray) -> np.ndarray:
        lower = np.array([-np.inf if b[0] is None else b[0] for b in self.bounds()])
        upper = np.array([np.inf if b[1] is None else b[1] for b in self.bounds()])
        return np.clip(p, lower, upper)

    def spec(self, variant: HermiteVariant, c: np.ndarray) -> HermiteSpec:
        return HermiteSpec(
            variant,
            tuple(c[self.theta_slice]),
            tuple(c[self.omega_slice]),
            tuple(c[self.mu0_slice]),
            (c[-1],),
        )


def _design(cells: list, layout: _Parameterization, grid: AgeGrid) -> np.ndarray:
    """Cells x coefficients matrix with ``alpha = X c``."""
    ages = np.array([cell.x for cell in cells], dtype=float)
    groups = np.array([cell.j for cell in cells]) - 1
    basis = hermite_basis_array(grid.standardize(ages))
    rows = np.arange(len(cells))
    design = np.zeros((len(cells), layout.size))
    design[rows, layout.theta_slice.start + groups] = basis[:, 0]
    omega_column = layout.omega_slice.start + (groups if layout.n_omega > 1 else 0)
    design[rows, omega_column] = basis[:, 1]
    mu0_column = layout.mu0_slice.start + (groups if layout.n_mu0 > 1 else 0)
    design[rows, mu0_column] = basis[:, 2]
    design[rows, -1] = basis[:, 3]
    return design


def _starting_coefficients(design: np.ndarray, deaths: np.ndarray,
                           exposure: np.ndarray) -> np.ndarray:
    """Weighted least squares of the empirical log rates on the design."""
    weights = np.sqrt(deaths + 0.5)
    log_rates = np.log((deaths + 0.5) / exposure)
    coefficients, *_ = np.linalg.lstsq(design * weights[:, None], log_rates * weights, rcond=None)
    return coefficients


def fit_hsm(cells, variant: HermiteVariant, constraints: ShapeConstraints = ShapeConstraints(),
            grid: AgeGrid = AgeGrid(), seed: int = 0) -> tuple:
    """Maximize ``Q`` over a grouped Hermite specification.

    Five deterministic starts are optimized by L-BFGS-B over the bounded
    reparameterization; the start with the highest ``Q`` wins, the lowest
    start index breaking ties.

    Parameters
    ----------
    cells : sequence of PooledCell
        Pooled cells, groups numbered ``1..J``. Cells without exposure are
        dropped.
    variant : HermiteVariant
        One of HSM1..HSM4.
    constraints : ShapeConstraints
        Active restrictions; all three by default.
    grid : AgeGrid
        Standardization of the ages.
    seed : int
        Seed of the start perturbations.

    Returns
    -------
    tuple
        ``(HermiteSpec, HsmFitReport)``.

    Raises
    ------
    DomainError
        If the variant is a Gompertz one, a group has no cell with exposure
        or the cells have no deaths at all.
    ConvergenceError
        If no start converges.
    """
    if variant.is_gompertz:
        raise DomainError("Gompertz variants are fitted by fit_gompertz")

    cells = list(cells)
    included = _included(cells)
    dropped = len(cells) - len(included)
    if dropped:
        _LOGGER.info("dropped %d cells without effective exposure", dropped)
    if not included:
        raise DomainError("no cells with positive effective exposure")

    groups = sorted({cell.j for cell in included})
    all_groups = sorted({cell.j for cell in cells})
    if all_groups != list(range(1, len(all_groups) + 1)):
        raise DomainError(f"groups must be numbered 1..J, got {all_groups}")
    if groups != all_groups:
        missing = sorted(set(all_groups) - set(groups))
        raise DomainError(f"group {missing[0]} has no cell with positive exposure")
    for cell in included:
        if not grid.x0 <= cell.x <= grid.x1:
            raise DomainError(f"age {cell.x} outside [{grid.x0}, {grid.x1}]")

    deaths = np.array([cell.d_pool for cell in included])
    exposure = np.array([cell.e_eff for cell in included])
    scale = deaths.sum()
    if scale <= 0:
        raise DomainError("the pooled cells contain no deaths")

    layout = _Parameterization(variant, constraints, len(groups))
    design = _design(included, layout, grid)
    bounds = layout.bounds()

    def objective(p):
        c, jac = layout.expand(p)
        eta = design @ c
        fitted = exposure * np.exp(eta)
        value = float(np.sum(deaths * eta - fitted))
        gradient = jac.T @ (design.T @ (deaths - fitted))
        return -value / scale, -gradient / scale

    base = layout.project(_starting_coefficients(design, deaths, exposure))
    starts = [base]
    for index in range(1, _START_COUNT):
        noise = substream(seed, "hsm-start", index).normal(scale=0.25, size=layout.size)
        starts.append(layout.clip(base + noise))

    results = []
    for index, start in enumerate(starts):
        result = minimize(
            objective,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": _MAX_ITER, "maxfun": 2 * _MAX_ITER, "ftol": 1e-15, "gtol": 1e-10},
        )
        _LOGGER.debug(
            "start %d: Q %.10g after %d iterations (%s)",
            index,
            -result.fun * scale,
            result.nit,
            result.message,
        )
        results.append(result)

    start_q = tuple(
        float(-r.fun * scale) if np.isfinite(r.fun) else float("-inf") for r in results
    )
    best_index = 0
    for index, value in enumerate(start_q):
        if value > start_q[best_index]:
            best_index = index
    best = results[best_index]
    if not np.isfinite(best.fun) or best.nit >= _MAX_ITER:
        raise ConvergenceError(
            f"{variant.value} fit did not converge: {best.message}",
            last_iterate=best.x,
            gradient_norm=float(np.linalg.norm(best.jac)),
            iterations=int(best.nit),
        )

    c, _ = layout.expand(best.x)
    spec = layout.spec(variant, c)
    q = q_objective(spec, included, grid)
    report = HsmFitReport(
        q=q,
        log_likelihood=poisson_log_likelihood(spec, included, grid),
        n_cells=len(included),
        k=parameter_count(variant, len(groups)),
        dropped=dropped,
        start_q=start_q,
        iterations=int(best.nit),
        converged=bool(best.success),
        message=str(best.message),
    )
    _LOGGER.info(
        "%s fit: Q %.6f from start %d, %d cells, %d parameters",
        variant.value,
        q,
        best_index,
        report.n_cells,
        report.k,
    )
    return spec, report


def fit_gompertz(cells, variant: HermiteVariant, grid: AgeGrid = AgeGrid()) -> tuple:
    """Fit a Gompertz variant and report it like :func:`fit_hsm`.

    Returns
    -------
    tuple
        ``(HermiteSpec, HsmFitReport)``; the report has a single start.

    Raises
    ------
    DomainError
        If the variant is not a Gompertz one or :func:`gompertz_fit` rejects
        the cells.
    """
    if not variant.is_gompertz:
        raise DomainError(f"{variant.value} is fitted by fit_hsm")
    cells = list(cells)
    included = _included(cells)
    dropped = len(cells) - len(included)
    if dropped:
        _LOGGER.info("dropped %d cells without effective exposure", dropped)

    spec = gompertz_fit(
        included, grid, constrained=variant is HermiteVariant.GOMPERTZ_CONSTRAINED
    )
    q = q_objective(spec, included, grid)
    report = HsmFitReport(
        q=q,
        log_likelihood=poisson_log_likelihood(spec, included, grid),
        n_cells=len(included),
        k=parameter_count(variant, spec.groups),
        dropped=dropped,
        start_q=(q,),
        iterations=0,
        converged=True,
        message="Poisson Gompertz fit",
    )
    _LOGGER.info(
        "%s fit: Q %.6f, %d cells, %d parameters", variant.value, q, report.n_cells, report.k
    )
    return spec, report


def beta_extended(lc: LCParams, ages: np.ndarray) -> np.ndarray:
    """``beta`` at ``ages``, held flat outside the national age range."""
    index = np.clip(np.asarray(ages, dtype=int) - lc.ages[0], 0, len(lc.ages) - 1)
    return lc.beta[index]


def group_surface(spec: HermiteSpec, lc: LCParams, x: int, j: int, t: int,
                  grid: AgeGrid = AgeGrid()) -> float:
    """Fitted central death rate ``exp(alpha_{x,j} + beta_x kappa_t)``.

    Raises
    ------
    DomainError
        If ``x`` is outside the grid or the national ages, ``t`` outside the
        national years or ``j`` not a group.
    """
    return float(
        np.exp(alpha_eval(spec, j, x, grid) + lc.beta_at(x) * lc.kappa_at(t))
    )


def period_rates(spec: HermiteSpec, lc: LCParams, j: int, kappa, grid: AgeGrid = AgeGrid(),
                 ages=None) -> np.ndarray:
    """Central death rates of group ``j`` over ``ages`` for a period index ``kappa``.

    ``kappa`` may be a scalar, giving one rate per age, or an array, giving
    one row of rates per value. Ages default to ``x0..x1-1``; ``beta`` is
    extended flat beyond the national ages.
    """
    ages = np.arange(grid.x0, grid.x1) if ages is None else np.asarray(ages)
    alpha = alpha_curve(spec, j, ages, grid)
    beta = beta_extended(lc, ages)
    kappa = np.asarray(kappa, dtype=float)
    return np.exp(alpha + np.multiply.outer(kappa, beta))
