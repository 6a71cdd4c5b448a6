"""Poisson Lee-Carter estimation on the national panel.

``log m(x, t) = alpha_x + beta_x kappa_t`` with ``D ~ Poisson(E m)``,
identified by ``sum(beta) = 1`` and ``kappa(ref_year) = 0``.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .exceptions import ConvergenceError, DomainError

_LOGGER = logging.getLogger(__name__)


def _frozen(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _check_contiguous(values: np.ndarray, name: str):
    if values.ndim != 1 or len(values) == 0:
        raise DomainError(f"{name} must be a non-empty one-dimensional range")
    if np.any(np.diff(values) != 1):
        raise DomainError(f"{name} must be a contiguous integer range")


@dataclass(frozen=True, eq=False)
class NationalPanel:
    """Deaths and exposure on a rectangular age x year grid.

    Attributes
    ----------
    ages : numpy.ndarray
        Contiguous integer ages, the row index of ``deaths`` and ``exposure``.
    years : numpy.ndarray
        Contiguous calendar years, the column index.
    deaths : numpy.ndarray
        Non-negative death counts.
    exposure : numpy.ndarray
        Non-negative central exposure. The fit requires it to be positive.
    """

    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ages", _frozen(self.ages, int))
        object.__setattr__(self, "years", _frozen(self.years, int))
        object.__setattr__(self, "deaths", _frozen(self.deaths))
        object.__setattr__(self, "exposure", _frozen(self.exposure))

        _check_contiguous(self.ages, "ages")
        _check_contiguous(self.years, "years")
        shape = (len(self.ages), len(self.years))
        for name in ("deaths", "exposure"):
            values = getattr(self, name)
            if values.shape != shape:
                raise DomainError(f"{name} must have shape {shape}, got {values.shape}")
            if not np.all(np.isfinite(values)):
                raise DomainError(f"{name} must be finite")
            if np.any(values < 0):
                raise DomainError(f"{name} must be non-negative")


@dataclass(frozen=True, eq=False)
class LCParams:
    """Identified Lee-Carter parameters.

    ``sum(beta) == 1`` to 1e-10 and ``kappa`` is exactly zero at ``ref_year``.
    """

    ages: np.ndarray
    years: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    ref_year: int

    def __post_init__(self):
        object.__setattr__(self, "ages", _frozen(self.ages, int))
        object.__setattr__(self, "years", _frozen(self.years, int))
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "kappa", _frozen(self.kappa))
        object.__setattr__(self, "ref_year", int(self.ref_year))

        _check_contiguous(self.ages, "ages")
        _check_contiguous(self.years, "years")
        if self.alpha.shape != self.ages.shape or self.beta.shape != self.ages.shape:
            raise DomainError("alpha and beta need one value per age")
        if self.kappa.shape != self.years.shape:
            raise DomainError("kappa needs one value per year")
        if abs(self.beta.sum() - 1.0) > 1e-10:
            raise DomainError(f"beta must sum to 1, sums to {self.beta.sum()!r}")
        if self.kappa[self.year_index(self.ref_year)] != 0.0:
            raise DomainError(f"kappa must be zero at the reference year {self.ref_year}")

    def age_index(self, x: int) -> int:
        """Row of age ``x``; raises :class:`DomainError` outside the fitted ages."""
        if not self.ages[0] <= x <= self.ages[-1] or int(x) != x:
            raise DomainError(f"age {x} outside {self.ages[0]}..{self.ages[-1]}")
        return int(x - self.ages[0])

    def year_index(self, t: int) -> int:
        """Column of year ``t``; raises :class:`DomainError` outside the fitted years."""
        if not self.years[0] <= t <= self.years[-1] or int(t) != t:
            raise DomainError(f"year {t} outside {self.years[0]}..{self.years[-1]}")
        return int(t - self.years[0])

    def kappa_at(self, t: int) -> float:
        return float(self.kappa[self.year_index(t)])

    def beta_at(self, x: int) -> float:
        return float(self.beta[self.age_index(x)])

    def log_m_surface(self) -> np.ndarray:
        """Fitted ``log m`` for every age (rows) and year (columns)."""
        return self.alpha[:, None] + np.outer(self.beta, self.kappa)


@dataclass(frozen=True)
class LCFitReport:
    """Diagnostics of :func:`fit_lc_poisson`.

    ``trace`` holds the full Poisson log-likelihood after every iteration.
    """

    log_likelihood: float
    deviance: float
    iterations: int
    gradient_norm: float
    trace: tuple


def normalize_lc(alpha, beta, kappa, ref_year: int, *, ages, years) -> LCParams:
    """Apply the identification restrictions to raw Lee-Carter factors.

    ``beta`` is scaled to unit sum and ``kappa`` inversely; ``kappa`` is then
    shifted to vanish at ``ref_year`` with the shift absorbed into ``alpha``.
    The fitted surface is unchanged.

    Raises
    ------
    DomainError
        If ``sum(beta)`` is zero or ``ref_year`` is not among ``years``.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    years = np.asarray(years, dtype=int)

    scale = beta.sum()
    if not np.isfinite(scale) or abs(scale) <= 1e-14 * max(1.0, np.abs(beta).sum()):
        raise DomainError("degenerate factorization: beta sums to zero")
    if not years[0] <= ref_year <= years[-1]:
        raise DomainError(f"reference year {ref_year} outside {years[0]}..{years[-1]}")

    beta = beta / scale
    kappa = kappa * scale
    shift = kappa[ref_year - years[0]]
    kappa = kappa - shift
    alpha = alpha + beta * shift
    return LCParams(ages, years, alpha, beta, kappa, ref_year)


def fitted_log_m(params: LCParams, x: int, t: int) -> float:
    """``alpha_x + beta_x kappa_t``; raises :class:`DomainError` out of range."""
    i = params.age_index(x)
    return float(params.alpha[i] + params.beta[i] * params.kappa[params.year_index(t)])


def _kernel(deaths, exposure, eta) -> float:
    return float(np.sum(deaths * eta - exposure * np.exp(eta)))


def _newton_block(current, step_fn, kernel_fn, value):
    """Take one Newton block update with step halving so the kernel never drops."""
    step = step_fn(current)
    factor = 1.0
    for _ in range(40):
        candidate = current + factor * step
        candidate_value = kernel_fn(candidate)
        if candidate_value >= value:
            return candidate, candidate_value
        factor *= 0.5
    return current, value


def fit_lc_poisson(panel: NationalPanel, ref_year: int, tol: float = 1e-10,
                   max_iter: int = 10000) -> tuple:
    """Fit the Poisson Lee-Carter model by alternating Newton updates.

    Each iteration updates ``alpha``, ``kappa`` and ``beta`` in turn with a
    one-dimensional Newton step per coordinate, halving the step until the
    log-likelihood does not decrease. The identification restrictions are
    applied once at convergence.

    Parameters
    ----------
    panel : NationalPanel
        Deaths and exposure; every exposure must be positive.
    ref_year : int
        Year at which ``kappa`` is pinned to zero.
    tol : float
        Convergence threshold on the relative change of the log-likelihood.
    max_iter : int
        Iteration limit.

    Returns
    -------
    tuple
        ``(LCParams, LCFitReport)``.

    Raises
    ------
    DomainError
        On zero exposure, an age without deaths, fewer than two ages or a
        reference year outside the panel.
    ConvergenceError
        If ``max_iter`` iterations do not reach ``tol``.
    """
    deaths = panel.deaths
    exposure = panel.exposure
    if len(panel.ages) < 2:
        raise DomainError("the national panel needs at least two ages")
    if not panel.years[0] <= ref_year <= panel.years[-1]:
        raise DomainError(
            f"reference year {ref_year} outside {panel.years[0]}..{panel.years[-1]}"
        )
    if np.any(exposure <= 0):
        x, t = np.argwhere(exposure <= 0)[0]
        raise DomainError(
            f"zero exposure at age {panel.ages[x]}, year {panel.years[t]}"
        )
    empty = np.flatnonzero(deaths.sum(axis=1) == 0)
    if len(empty):
        raise DomainError(f"no deaths at age {panel.ages[empty[0]]}: alpha is unbounded")

    n_ages, n_years = deaths.shape
    log_rates = np.log(np.where(deaths > 0, deaths, 0.5) / exposure)
    alpha = log_rates.mean(axis=1)
    kappa = (log_rates - alpha[:, None]).sum(axis=0)
    beta = np.full(n_ages, 1.0 / n_ages)

    constant = float(np.sum(xlogy(deaths, exposure) - gammaln(deaths + 1.0)))

    def kernel_of(a, b, k):
        return _kernel(deaths, exposure, a[:, None] + np.outer(b, k))

    value = kernel_of(alpha, beta, kappa)
    trace = [value + constant]

    for iteration in range(1, max_iter + 1):
        previous = value

        def alpha_step(a):
            fitted = exposure * np.exp(a[:, None] + np.outer(beta, kappa))
            return (deaths - fitted).sum(axis=1) / fitted.sum(axis=1)

        alpha, value = _newton_block(
            alpha, alpha_step, lambda a: kernel_of(a, beta, kappa), value
        )

        def kappa_step(k):
            fitted = exposure * np.exp(alpha[:, None] + np.outer(beta, k))
            curvature = (fitted * beta[:, None] ** 2).sum(axis=0)
            gradient = ((deaths - fitted) * beta[:, None]).sum(axis=0)
            return np.divide(gradient, curvature, out=np.zeros_like(k), where=curvature > 0)

        kappa, value = _newton_block(
            kappa, kappa_step, lambda k: kernel_of(alpha, beta, k), value
        )

        def beta_step(b):
            fitted = exposure * np.exp(alpha[:, None] + np.outer(b, kappa))
            curvature = (fitted * kappa[None, :] ** 2).sum(axis=1)
            gradient = ((deaths - fitted) * kappa[None, :]).sum(axis=1)
            # kappa carries no signal: beta is not identified
            informative = curvature > 1e-20 * fitted.sum(axis=1)
            return np.divide(gradient, curvature, out=np.zeros_like(b), where=informative)

        beta, value = _newton_block(
            beta, beta_step, lambda b: kernel_of(alpha, b, kappa), value
        )

        trace.append(value + constant)
        if iteration % 500 == 0:
            _LOGGER.debug("iteration %d: log-likelihood %.10g", iteration, trace[-1])

        change = abs(value - previous)
        if change == 0.0 or change < tol * abs(previous):
            break
    else:
        fitted = exposure * np.exp(alpha[:, None] + np.outer(beta, kappa))
        raise ConvergenceError(
            "Lee-Carter fit did not converge",
            last_iterate={"alpha": alpha, "beta": beta, "kappa": kappa},
            gradient_norm=_gradient_norm(deaths - fitted, beta, kappa),
            iterations=max_iter,
        )

    params = normalize_lc(alpha, beta, kappa, ref_year, ages=panel.ages, years=panel.years)
    fitted = exposure * np.exp(params.log_m_surface())
    residual = deaths - fitted
    deviance = 2.0 * float(np.sum(xlogy(deaths, deaths / fitted) - residual))
    report = LCFitReport(
        log_likelihood=trace[-1],
        deviance=deviance,
        iterations=iteration,
        gradient_norm=_gradient_norm(residual, params.beta, params.kappa),
        trace=tuple(trace),
    )
    _LOGGER.info(
        "Lee-Carter fit converged after %d iterations, log-likelihood %.6f, deviance %.6f",
        iteration,
        report.log_likelihood,
        report.deviance,
    )
    return params, report


def _gradient_norm(residual: np.ndarray, beta: np.ndarray, kappa: np.ndarray) -> float:
    gradient = np.concatenate(
        (
            residual.sum(axis=1),
            (residual * kappa[None, :]).sum(axis=1),
            (residual * beta[:, None]).sum(axis=0),
        )
    )
    return float(np.linalg.norm(gradient))
