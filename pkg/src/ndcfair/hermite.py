"""Hermite-spline baselines of group log mortality.

The baseline log central death rate of group ``j`` at age ``x`` is

    alpha(x, j) = theta_j h00(s) + omega_j h01(s) + mu0_j h10(s) + mu1_j h11(s)

with ``s = (x - x0) / (x1 - x0)`` the standardized age. The grouped
specifications HSM1..HSM4 differ in which coefficients are shared across
groups; the Gompertz variants are the affine special case
``mu0_j = mu1_j = omega_j - theta_j``.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .exceptions import ConvergenceError, DomainError

_LOGGER = logging.getLogger(__name__)

_ENDPOINT_SLACK = 1e-12
_CROSSOVER_TOLERANCE = 1e-10


@dataclass(frozen=True)
class AgeGrid:
    """Fitted age range ``[x0, x1]`` and the standardized age map."""

    x0: int = 50
    x1: int = 120

    def __post_init__(self):
        if int(self.x0) != self.x0 or int(self.x1) != self.x1:
            raise DomainError(f"age grid bounds must be integers: {self.x0}, {self.x1}")
        if self.x0 >= self.x1:
            raise DomainError(f"age grid needs x0 < x1, got {self.x0}, {self.x1}")

    @property
    def width(self) -> int:
        """Length ``x1 - x0`` of the age range in years."""
        return self.x1 - self.x0

    def standardize(self, x):
        """Map an age (or an array of ages) to ``(x - x0) / (x1 - x0)``."""
        return (np.asarray(x, dtype=float) - self.x0) / self.width

    def ages(self) -> np.ndarray:
        """All integer ages of the grid, both ends included."""
        return np.arange(self.x0, self.x1 + 1)


class BasisValues(NamedTuple):
    """The four cubic Hermite basis polynomials at one standardized age."""

    h00: float
    h01: float
    h10: float
    h11: float


class HermiteVariant(Enum):
    """Grouped specifications of the Hermite baseline."""

    HSM1 = "HSM1"
    HSM2 = "HSM2"
    HSM3 = "HSM3"
    HSM4 = "HSM4"
    GOMPERTZ_FREE = "GompertzFree"
    GOMPERTZ_CONSTRAINED = "GompertzConstrained"

    @property
    def is_gompertz(self) -> bool:
        return self in (HermiteVariant.GOMPERTZ_FREE, HermiteVariant.GOMPERTZ_CONSTRAINED)


# (omega shared, mu0 shared, mu1 shared)
_SHARED_LAYOUT = {
    HermiteVariant.HSM1: (False, False, True),
    HermiteVariant.HSM2: (False, True, True),
    HermiteVariant.HSM3: (True, False, True),
    HermiteVariant.HSM4: (True, True, True),
    HermiteVariant.GOMPERTZ_FREE: (False, False, False),
    HermiteVariant.GOMPERTZ_CONSTRAINED: (False, False, False),
}


def shared_layout(variant: HermiteVariant) -> tuple:
    """Return which of ``(omega, mu0, mu1)`` are shared across groups."""
    return _SHARED_LAYOUT[variant]


def parameter_count(variant: HermiteVariant, groups: int) -> int:
    """Number of free coefficients of a variant with ``groups`` groups.

    HSM1 has 3J+1, HSM2 and HSM3 have 2J+2, HSM4 has J+3 and the Gompertz
    variants have 2J (level and slope per group).
    """
    if variant.is_gompertz:
        return 2 * groups
    omega_shared, mu0_shared, _ = _SHARED_LAYOUT[variant]
    count = groups + 1
    count += 1 if omega_shared else groups
    count += 1 if mu0_shared else groups
    return count


@dataclass(frozen=True)
class HermiteSpec:
    """Coefficients of a grouped Hermite baseline.

    Attributes
    ----------
    variant : HermiteVariant
        Which coefficients are shared across groups.
    theta : tuple
        Log mortality at ``x0`` per group, always group-specific.
    omega : tuple
        Log mortality at ``x1``; one shared value or one per group.
    mu0 : tuple
        Slope at ``x0`` in standardized age; shared or per group.
    mu1 : tuple
        Slope at ``x1``; shared except for the Gompertz variants.
    """

    variant: HermiteVariant
    theta: tuple
    omega: tuple
    mu0: tuple
    mu1: tuple

    def __post_init__(self):
        for name in ("theta", "omega", "mu0", "mu1"):
            values = tuple(float(v) for v in getattr(self, name))
            if not all(np.isfinite(values)):
                raise DomainError(f"{name} must be finite")
            object.__setattr__(self, name, values)

        groups = len(self.theta)
        if groups < 1:
            raise DomainError("a Hermite specification needs at least one group")

        for name, shared in zip(("omega", "mu0", "mu1"), _SHARED_LAYOUT[self.variant]):
            expected = 1 if shared else groups
            if len(getattr(self, name)) != expected:
                raise DomainError(
                    f"{self.variant.value} needs {expected} {name} value(s), "
                    f"got {len(getattr(self, name))}"
                )

        if self.variant.is_gompertz:
            for j in range(groups):
                slope = self.omega[j] - self.theta[j]
                scale = 1.0 + abs(slope)
                if abs(self.mu0[j] - slope) > 1e-9 * scale or abs(self.mu1[j] - slope) > 1e-9 * scale:
                    raise DomainError(
                        f"Gompertz group {j + 1} needs mu0 = mu1 = omega - theta"
                    )

    @property
    def groups(self) -> int:
        """Number of groups ``J``."""
        return len(self.theta)

    def coefficients(self, j: int) -> tuple:
        """Return ``(theta, omega, mu0, mu1)`` of the one-based group ``j``."""
        if not 1 <= j <= self.groups:
            raise DomainError(f"group index {j} outside 1..{self.groups}")
        i = j - 1

        def pick(values):
            return values[0] if len(values) == 1 else values[i]

        return (self.theta[i], pick(self.omega), pick(self.mu0), pick(self.mu1))

    def coefficient_matrix(self) -> np.ndarray:
        """``J x 4`` array of the per-group coefficients, shared ones repeated."""
        return np.array([self.coefficients(j) for j in range(1, self.groups + 1)])


def hermite_basis(x_std: float) -> BasisValues:
    """Evaluate the Hermite basis at a standardized age in ``[0, 1]``.

    Values within 1e-12 outside the interval are clamped to the endpoint.

    Raises
    ------
    DomainError
        If the standardized age is outside ``[0, 1]``.
    """
    s = float(x_std)
    if s < 0.0:
        if s < -_ENDPOINT_SLACK:
            raise DomainError(f"standardized age {s} outside [0, 1]")
        s = 0.0
    elif s > 1.0:
        if s > 1.0 + _ENDPOINT_SLACK:
            raise DomainError(f"standardized age {s} outside [0, 1]")
        s = 1.0

    t = 1.0 - s
    return BasisValues(
        (1.0 + 2.0 * s) * t * t,
        s * s * (3.0 - 2.0 * s),
        s * t * t,
        s * s * (s - 1.0),
    )


def hermite_basis_array(x_std) -> np.ndarray:
    """Vectorized :func:`hermite_basis`; returns an ``n x 4`` array."""
    s = np.atleast_1d(np.asarray(x_std, dtype=float))
    if np.any(s < -_ENDPOINT_SLACK) or np.any(s > 1.0 + _ENDPOINT_SLACK):
        raise DomainError("standardized ages outside [0, 1]")
    s = np.clip(s, 0.0, 1.0)
    t = 1.0 - s
    return np.column_stack(
        (
            (1.0 + 2.0 * s) * t * t,
            s * s * (3.0 - 2.0 * s),
            s * t * t,
            s * s * (s - 1.0),
        )
    )


def alpha_eval(spec: HermiteSpec, j: int, x: float, grid: AgeGrid) -> float:
    """Baseline log central death rate of group ``j`` (one-based) at age ``x``.

    Raises
    ------
    DomainError
        If ``j`` is not a group of the specification or ``x`` is outside the grid.
    """
    theta, omega, mu0, mu1 = spec.coefficients(j)
    if not grid.x0 <= x <= grid.x1:
        raise DomainError(f"age {x} outside [{grid.x0}, {grid.x1}]")
    basis = hermite_basis(grid.standardize(x))
    if x == grid.x0:
        return theta
    if x == grid.x1:
        return omega
    return theta * basis.h00 + omega * basis.h01 + mu0 * basis.h10 + mu1 * basis.h11


def alpha_curve(spec: HermiteSpec, j: int, ages, grid: AgeGrid) -> np.ndarray:
    """Vectorized :func:`alpha_eval` over an array of ages."""
    ages = np.asarray(ages, dtype=float)
    if np.any(ages < grid.x0) or np.any(ages > grid.x1):
        raise DomainError(f"ages outside [{grid.x0}, {grid.x1}]")
    return hermite_basis_array(grid.standardize(ages)) @ np.asarray(spec.coefficients(j))


def gompertz_spec(levels: Sequence[float], slopes: Sequence[float], grid: AgeGrid,
                  constrained: bool = False) -> HermiteSpec:
    """Build the Hermite form of Gompertz laws ``alpha = a_j + b_j x``.

    Parameters
    ----------
    levels : sequence of float
        ``a_j``, log mortality extrapolated to age 0.
    slopes : sequence of float
        ``b_j``, log mortality growth per year of age.
    grid : AgeGrid
        Age range the Hermite form is expressed on.
    constrained : bool
        Tag the result as the constrained Gompertz variant.
    """
    levels = np.asarray(levels, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    theta = levels + slopes * grid.x0
    omega = levels + slopes * grid.x1
    slope = omega - theta
    variant = HermiteVariant.GOMPERTZ_CONSTRAINED if constrained else HermiteVariant.GOMPERTZ_FREE
    return HermiteSpec(variant, tuple(theta), tuple(omega), tuple(slope), tuple(slope))


def gompertz_coefficients(spec: HermiteSpec, grid: AgeGrid) -> list:
    """Return ``[(a_j, b_j), ...]`` of a Gompertz-variant specification."""
    if not spec.variant.is_gompertz:
        raise DomainError(f"{spec.variant.value} is not a Gompertz variant")
    result = []
    for theta, omega in zip(spec.theta, spec.omega):
        slope = (omega - theta) / grid.width
        result.append((theta - slope * grid.x0, slope))
    return result


def _group_arrays(cells, grid: AgeGrid) -> dict:
    """Collect ``{j: (ages, deaths, exposure)}`` from pooled cells with exposure."""
    groups = {}
    for cell in cells:
        if cell.e_eff <= 0:
            continue
        groups.setdefault(cell.j, []).append((cell.x, cell.d_pool, cell.e_eff))
    result = {}
    for j, rows in sorted(groups.items()):
        data = np.array(rows, dtype=float)
        if np.any(data[:, 0] < grid.x0) or np.any(data[:, 0] > grid.x1):
            raise DomainError(f"group {j} has ages outside [{grid.x0}, {grid.x1}]")
        result[j] = (data[:, 0], data[:, 1], data[:, 2])
    return result


def _check_group(j: int, ages: np.ndarray, deaths: np.ndarray):
    if len(np.unique(ages)) < 2:
        raise DomainError(f"group {j} needs at least two distinct ages with exposure")
    if not np.any(deaths > 0):
        raise DomainError(f"group {j} has no deaths: the Gompertz MLE is unbounded")


def _newton_line(z: np.ndarray, deaths: np.ndarray, exposure: np.ndarray,
                 max_iter: int = 200) -> np.ndarray:
    """Poisson MLE of ``log m = c0 + c1 z`` by Newton's method with step halving."""
    coef = np.array([np.log(deaths.sum() / exposure.sum()), 0.0])
    design = np.column_stack((np.ones_like(z), z))

    def loglik(c):
        eta = design @ c
        return float(np.sum(deaths * eta - exposure * np.exp(eta)))

    current = loglik(coef)
    for iteration in range(max_iter):
        mu = exposure * np.exp(design @ coef)
        gradient = design.T @ (deaths - mu)
        hessian = design.T @ (design * mu[:, None])
        step = np.linalg.solve(hessian, gradient)
        factor = 1.0
        while True:
            candidate = coef + factor * step
            value = loglik(candidate)
            if value >= current or factor < 1e-10:
                break
            factor *= 0.5
        coef, current = candidate, value
        if np.max(np.abs(factor * step)) < 1e-12 * (1.0 + np.max(np.abs(coef))):
            _LOGGER.debug("Gompertz line converged after %d iterations", iteration + 1)
            return coef
    raise ConvergenceError(
        "Gompertz fit did not converge",
        last_iterate=coef,
        gradient_norm=float(np.linalg.norm(gradient)),
        iterations=max_iter,
    )


def gompertz_fit(cells, grid: AgeGrid = AgeGrid(), constrained: bool = False) -> HermiteSpec:
    """Fit Gompertz laws to pooled group cells by Poisson maximum likelihood.

    The unconstrained variant fits each group independently. The constrained
    variant fits all groups jointly subject to ``a_j <= a_i`` and
    ``b_j <= b_i`` for ``j > i``.

    Parameters
    ----------
    cells : iterable
        Objects with ``x``, ``j``, ``d_pool`` and ``e_eff`` attributes
        (see :class:`ndcfair.subgroup_fit.PooledCell`). Groups must be
        numbered ``1..J``.
    grid : AgeGrid
        Age range of the returned Hermite form.
    constrained : bool
        Impose the monotone level and slope ordering.

    Raises
    ------
    DomainError
        If a group has fewer than two distinct ages or no deaths.
    """
    groups = _group_arrays(cells, grid)
    if not groups:
        raise DomainError("no cells with positive exposure")
    if list(groups) != list(range(1, len(groups) + 1)):
        raise DomainError(f"groups must be numbered 1..J, got {list(groups)}")

    free = []
    for j, (ages, deaths, exposure) in groups.items():
        _check_group(j, ages, deaths)
        free.append(_newton_line(grid.standardize(ages), deaths, exposure))
    free = np.array(free)

    # c0 + c1 s with s standardized: theta = c0, omega = c0 + c1
    slopes = free[:, 1] / grid.width
    levels = free[:, 0] - slopes * grid.x0
    if not constrained:
        return gompertz_spec(levels, slopes, grid)

    levels, slopes = _fit_ordered_gompertz(groups, grid, levels, slopes)
    return gompertz_spec(levels, slopes, grid, constrained=True)


def _fit_ordered_gompertz(groups: dict, grid: AgeGrid, levels: np.ndarray,
                          slopes: np.ndarray) -> tuple:
    """Joint fit with weakly decreasing levels and slopes across groups."""
    count = len(groups)
    scale = grid.width
    data = [(ages / scale, deaths, exposure) for ages, deaths, exposure in groups.values()]
    total_deaths = sum(float(d.sum()) for _, d, _ in data)

    def expand(p):
        level = p[0] - np.concatenate(([0.0], np.cumsum(p[1:count])))
        slope = p[count] - np.concatenate(([0.0], np.cumsum(p[count + 1:])))
        return level, slope

    # d(level_j)/d(p_k) for the cumulative-difference parameterization
    cumulative = np.zeros((count, count))
    cumulative[:, 0] = 1.0
    for j in range(1, count):
        cumulative[j, 1:j + 1] = -1.0

    def objective(p):
        level, slope = expand(p)
        value = 0.0
        grad_level = np.zeros(count)
        grad_slope = np.zeros(count)
        for j, (z, deaths, exposure) in enumerate(data):
            eta = level[j] + slope[j] * z
            mu = exposure * np.exp(eta)
            value += float(np.sum(deaths * eta - mu))
            residual = deaths - mu
            grad_level[j] = residual.sum()
            grad_slope[j] = float(residual @ z)
        gradient = np.concatenate((cumulative.T @ grad_level, cumulative.T @ grad_slope))
        return -value / total_deaths, -gradient / total_deaths

    start_level = np.minimum.accumulate(levels)
    start_slope = np.minimum.accumulate(slopes * scale)
    start = np.concatenate(
        (
            [start_level[0]],
            -np.diff(start_level),
            [start_slope[0]],
            -np.diff(start_slope),
        )
    )
    bounds = [(None, None)] + [(0.0, None)] * (count - 1)
    bounds = bounds + bounds
    result = minimize(
        objective,
        start,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 20000, "ftol": 1e-15, "gtol": 1e-10},
    )
    if not np.isfinite(result.fun) or result.nit >= 20000:
        raise ConvergenceError(
            "constrained Gompertz fit did not converge",
            last_iterate=result.x,
            gradient_norm=float(np.linalg.norm(result.jac)),
            iterations=int(result.nit),
        )
    level, slope = expand(result.x)
    return level, slope / scale


class CrossoverCheck(NamedTuple):
    """Outcome of :func:`check_non_crossover`.

    ``ok`` and ``violations`` refer to the slope inequality alone.
    ``endpoint_violations`` lists the pairs whose group-specific ``omega``
    is not ordered like ``theta``; it is empty when ``omega`` is shared.
    """

    ok: bool
    violations: tuple
    endpoint_violations: tuple = ()


def check_non_crossover(spec: HermiteSpec) -> CrossoverCheck:
    """Check the analytic sufficient non-crossover condition.

    Every ordered pair ``j > i`` must satisfy
    ``mu0_j - mu0_i <= -3 (theta_j - theta_i)``. The condition is the same
    for every variant; the Gompertz slopes enter through ``mu0``.

    Returns
    -------
    CrossoverCheck
        ``ok``, the one-based ``(i, j)`` pairs that violate the inequality
        and the pairs with unordered group-specific ``omega``.
    """
    coefficients = spec.coefficient_matrix()
    omega_shared = _SHARED_LAYOUT[spec.variant][0]
    violations = []
    endpoint_violations = []
    for i in range(spec.groups):
        for j in range(i + 1, spec.groups):
            theta_i, omega_i, mu0_i, _ = coefficients[i]
            theta_j, omega_j, mu0_j, _ = coefficients[j]
            if mu0_j - mu0_i > -3.0 * (theta_j - theta_i) + _CROSSOVER_TOLERANCE:
                violations.append((i + 1, j + 1))
            if not omega_shared and omega_j > omega_i + _CROSSOVER_TOLERANCE:
                endpoint_violations.append((i + 1, j + 1))
    return CrossoverCheck(not violations, tuple(violations), tuple(endpoint_violations))
