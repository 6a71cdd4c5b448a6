"""Reading and writing of panels, fitted models and rule schedules.

CSV files are UTF-8 with a header line, a period decimal separator and no
thousands separators. Floats are written with the shortest representation
that reads back to the same value, JSON numbers are never quoted.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import pandas as pd
import yaml

from .annuity import OFFICIAL_SCHEDULE, OfficialSchedule
from .exceptions import DataValidationError, DomainError
from .hermite import AgeGrid, HermiteSpec, HermiteVariant
from .national_lc import LCParams, NationalPanel
from .random_streams import substream
from .rules import FairAnchors, IncomeQuintiles, RuleKind, RuleSchedule
from .subgroup_fit import DEFAULT_WAVES, SubgroupPanel, group_surface

_LOGGER = logging.getLogger(__name__)

NATIONAL_COLUMNS = ["age", "year", "deaths", "exposure"]
SUBGROUP_COLUMNS = ["age", "quintile", "wave", "exposure", "deaths"]

_FORMAT_VERSION = 1


def _line(index: int) -> int:
    """Line number of a data row; the header is line 1."""
    return int(index) + 2


def _read_table(path, columns: list, integer_columns: tuple) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8", newline="") as stream:
        try:
            frame = pd.read_csv(stream, float_precision="round_trip", skipinitialspace=True)
        except pd.errors.EmptyDataError:
            raise DataValidationError("file is empty", row=1) from None
        except pd.errors.ParserError as ex:
            raise DataValidationError(f"malformed CSV: {ex}") from None

    if list(frame.columns) != columns:
        raise DataValidationError(
            f"header must be {','.join(columns)}, got {','.join(map(str, frame.columns))}",
            row=1,
        )
    if frame.empty:
        raise DataValidationError("no data rows", row=1)

    for column in columns:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.astype(float))
        if bad.any():
            index = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataValidationError(
                f"{column} is not a finite number: {frame[column].iloc[index]!r}",
                row=_line(index),
            )
        if numeric.dtype == object:
            numeric = numeric.astype(float)
        frame[column] = numeric

    for column in integer_columns:
        values = frame[column].to_numpy(dtype=float)
        fractional = np.flatnonzero(values != np.round(values))
        if len(fractional):
            raise DataValidationError(
                f"{column} must be an integer, got {values[fractional[0]]!r}",
                row=_line(fractional[0]),
            )
        frame[column] = values.astype(int)

    for column in columns:
        negative = np.flatnonzero(frame[column].to_numpy(dtype=float) < 0)
        if len(negative):
            raise DataValidationError(f"{column} must be non-negative", row=_line(negative[0]))
    return frame


def _first_duplicate(frame: pd.DataFrame, keys: list):
    duplicated = np.flatnonzero(frame.duplicated(subset=keys).to_numpy())
    return int(duplicated[0]) if len(duplicated) else None


def read_national_csv(path) -> NationalPanel:
    """Read the national ``age,year,deaths,exposure`` panel.

    Raises
    ------
    DataValidationError
        For a wrong header, a non-numeric, negative or non-integer key value,
        zero exposure, a duplicate cell or a cell missing from the
        rectangular age x year grid.
    """
    frame = _read_table(path, NATIONAL_COLUMNS, ("age", "year"))

    zero = np.flatnonzero(frame["exposure"].to_numpy() <= 0)
    if len(zero):
        raise DataValidationError("exposure must be positive", row=_line(zero[0]))
    duplicate = _first_duplicate(frame, ["age", "year"])
    if duplicate is not None:
        row = frame.iloc[duplicate]
        raise DataValidationError(
            f"duplicate cell (age {row.age}, year {row.year})", row=_line(duplicate)
        )

    ages = np.arange(frame["age"].min(), frame["age"].max() + 1)
    years = np.arange(frame["year"].min(), frame["year"].max() + 1)
    full = pd.MultiIndex.from_product([ages, years], names=["age", "year"])
    indexed = frame.set_index(["age", "year"]).reindex(full)
    missing = indexed["deaths"].isna()
    if missing.any():
        age, year = indexed.index[np.flatnonzero(missing.to_numpy())[0]]
        raise DataValidationError(f"missing cell (age {age}, year {year})")

    shape = (len(ages), len(years))
    _LOGGER.debug("read national panel with %d ages and %d years", *shape)
    return NationalPanel(
        ages,
        years,
        indexed["deaths"].to_numpy(dtype=float).reshape(shape),
        indexed["exposure"].to_numpy(dtype=float).reshape(shape),
    )


def read_subgroup_csv(path, waves=DEFAULT_WAVES, groups: int = 5) -> SubgroupPanel:
    """Read the subgroup ``age,quintile,wave,exposure,deaths`` panel.

    Parameters
    ----------
    path : str
        File to read.
    waves : Mapping
        Interval length of every accepted wave.
    groups : int
        Number of income groups; quintiles run ``1..groups``.

    Raises
    ------
    DataValidationError
        For a wrong header, an unknown quintile or wave, deaths above
        exposure, a negative value or a duplicate cell.
    """
    frame = _read_table(path, SUBGROUP_COLUMNS, ("age", "quintile", "wave"))

    quintiles = frame["quintile"].to_numpy()
    outside = np.flatnonzero((quintiles < 1) | (quintiles > groups))
    if len(outside):
        raise DataValidationError(
            f"quintile {quintiles[outside[0]]} outside 1..{groups}", row=_line(outside[0])
        )
    unknown = np.flatnonzero(~frame["wave"].isin(list(waves)).to_numpy())
    if len(unknown):
        raise DataValidationError(
            f"no interval length configured for wave {frame['wave'].iloc[unknown[0]]}",
            row=_line(unknown[0]),
        )
    excess = np.flatnonzero((frame["deaths"] > frame["exposure"]).to_numpy())
    if len(excess):
        raise DataValidationError("deaths exceed exposure", row=_line(excess[0]))
    duplicate = _first_duplicate(frame, ["age", "quintile", "wave"])
    if duplicate is not None:
        row = frame.iloc[duplicate]
        raise DataValidationError(
            f"duplicate cell (age {row.age}, quintile {row.quintile}, wave {row.wave})",
            row=_line(duplicate),
        )

    return SubgroupPanel(
        frame["age"].to_numpy(),
        frame["quintile"].to_numpy(),
        frame["wave"].to_numpy(),
        frame["exposure"].to_numpy(dtype=float),
        frame["deaths"].to_numpy(dtype=float),
        waves,
    )


def write_csv(frame: pd.DataFrame, path) -> None:
    """Write a table with round-trip floats and ``\\n`` line ends."""
    with open(path, "w", encoding="utf-8", newline="") as stream:
        frame.to_csv(stream, index=False, lineterminator="\n")


def write_national_csv(panel: NationalPanel, path) -> None:
    ages, years = np.meshgrid(panel.ages, panel.years, indexing="ij")
    write_csv(
        pd.DataFrame(
            {
                "age": ages.ravel(),
                "year": years.ravel(),
                "deaths": panel.deaths.ravel(),
                "exposure": panel.exposure.ravel(),
            }
        ),
        path,
    )


def write_subgroup_csv(panel: SubgroupPanel, path) -> None:
    write_csv(
        pd.DataFrame(
            {
                "age": panel.ages,
                "quintile": panel.groups,
                "wave": panel.waves_of_rows,
                "exposure": panel.exposure,
                "deaths": panel.deaths,
            }
        ),
        path,
    )


def write_official_csv(path, schedule: OfficialSchedule = OFFICIAL_SCHEDULE) -> None:
    """Export the official counting-month table as ``age,counting_month``."""
    write_csv(schedule.to_frame(), path)


# JSON documents

def write_json(document: dict, path) -> None:
    """Write a JSON document without NaN or infinite numbers."""
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(document, stream, indent=2, allow_nan=False)
        stream.write("\n")


def _load(path, kind: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as stream:
            document = json.load(stream)
    except json.JSONDecodeError as ex:
        raise DataValidationError(f"invalid JSON: {ex.msg}", row=ex.lineno) from None
    if not isinstance(document, dict) or document.get("kind") != kind:
        raise DataValidationError(f"not a {kind} document")
    return document


def lc_to_dict(params: LCParams) -> dict:
    return {
        "kind": "lee_carter",
        "version": _FORMAT_VERSION,
        "ref_year": params.ref_year,
        "ages": params.ages.tolist(),
        "years": params.years.tolist(),
        "alpha": params.alpha.tolist(),
        "beta": params.beta.tolist(),
        "kappa": params.kappa.tolist(),
    }


def lc_from_dict(document: dict) -> LCParams:
    try:
        return LCParams(
            document["ages"],
            document["years"],
            document["alpha"],
            document["beta"],
            document["kappa"],
            document["ref_year"],
        )
    except KeyError as ex:
        raise DataValidationError(f"missing field {ex.args[0]}") from None


def save_lc(params: LCParams, path) -> None:
    write_json(lc_to_dict(params), path)


def load_lc(path) -> LCParams:
    return lc_from_dict(_load(path, "lee_carter"))


def hermite_to_dict(spec: HermiteSpec, grid: AgeGrid = AgeGrid()) -> dict:
    return {
        "kind": "hermite",
        "version": _FORMAT_VERSION,
        "variant": spec.variant.value,
        "grid": {"x0": grid.x0, "x1": grid.x1},
        "theta": list(spec.theta),
        "omega": list(spec.omega),
        "mu0": list(spec.mu0),
        "mu1": list(spec.mu1),
    }


def hermite_from_dict(document: dict) -> tuple:
    """Return ``(HermiteSpec, AgeGrid)``."""
    try:
        spec = HermiteSpec(
            HermiteVariant(document["variant"]),
            document["theta"],
            document["omega"],
            document["mu0"],
            document["mu1"],
        )
        grid = AgeGrid(document["grid"]["x0"], document["grid"]["x1"])
    except KeyError as ex:
        raise DataValidationError(f"missing field {ex.args[0]}") from None
    return spec, grid


def save_hermite(spec: HermiteSpec, path, grid: AgeGrid = AgeGrid()) -> None:
    write_json(hermite_to_dict(spec, grid), path)


def load_hermite(path) -> tuple:
    """Return ``(HermiteSpec, AgeGrid)`` stored in ``path``."""
    return hermite_from_dict(_load(path, "hermite"))


def schedule_to_dict(schedule: RuleSchedule) -> dict:
    """JSON layout of a rule schedule.

    ``knots`` are the interior bracket boundaries (step rules) or the
    quintile means (linear rules); ``cumulative`` holds the normalized
    benefits at bracket starts or at the means of the marginal rules;
    ``provenance`` records the anchors.
    """
    return {
        "kind": "rule_schedule",
        "version": _FORMAT_VERSION,
        "rule": schedule.kind.value,
        "method": schedule.kind.method,
        "knots": list(schedule.knots),
        "values": list(schedule.values),
        "cumulative": list(schedule.cumulative),
        "objective": schedule.objective,
        "provenance": dict(schedule.provenance),
    }


def schedule_from_dict(document: dict) -> RuleSchedule:
    try:
        return RuleSchedule(
            RuleKind(document["rule"]),
            document["knots"],
            document["values"],
            document["cumulative"],
            document["objective"],
            document.get("provenance", {}),
        )
    except KeyError as ex:
        raise DataValidationError(f"missing field {ex.args[0]}") from None


def save_schedule(schedule: RuleSchedule, path) -> None:
    write_json(schedule_to_dict(schedule), path)


def load_schedule(path) -> RuleSchedule:
    return schedule_from_dict(_load(path, "rule_schedule"))


def anchors_from_dict(document: dict) -> tuple:
    """``(FairAnchors, IncomeQuintiles)`` from ``months``, ``means`` and ``boundaries``.

    ``boundaries`` lists the finite interior bracket boundaries only.
    """
    try:
        months = document["months"]
        means = document["means"]
        interior = document["boundaries"]
    except KeyError as ex:
        raise DataValidationError(f"anchors need field {ex.args[0]}") from None
    boundaries = [0.0] + [float(b) for b in interior] + [math.inf]
    anchors = FairAnchors(tuple(months))
    quintiles = IncomeQuintiles(tuple(means), tuple(boundaries))
    anchors.normalized_benefits(quintiles)
    return anchors, quintiles


def load_anchors(path) -> tuple:
    """Read anchors from a YAML or JSON file, see :func:`anchors_from_dict`."""
    with open(path, "r", encoding="utf-8") as stream:
        try:
            document = yaml.safe_load(stream)
        except yaml.YAMLError as ex:
            raise DataValidationError(f"invalid anchors file: {ex}") from None
    if not isinstance(document, dict):
        raise DataValidationError("anchors file must hold a mapping")
    return anchors_from_dict(document)


# synthetic data

@dataclass(frozen=True)
class SyntheticTruth:
    """Model that generates a synthetic dataset.

    Attributes
    ----------
    lc : LCParams
        National model; its ages and years span the national panel.
    spec : HermiteSpec
        Group baselines.
    grid : AgeGrid
        Age grid of ``spec``.
    subgroup_ages : tuple
        Ages of the subgroup panel.
    waves : Mapping
        Survey waves and their interval lengths.
    exposure_scale : float
        National central exposure per cell and subgroup persons per cell.
    seed : int
        Seed of the Poisson draws.
    """

    lc: LCParams
    spec: HermiteSpec
    grid: AgeGrid = AgeGrid()
    subgroup_ages: tuple = tuple(range(50, 96))
    waves: MappingProxyType = field(default=DEFAULT_WAVES)
    exposure_scale: float = 1e8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subgroup_ages", tuple(int(x) for x in self.subgroup_ages))
        object.__setattr__(
            self, "waves", MappingProxyType({int(k): float(v) for k, v in self.waves.items()})
        )
        if not self.exposure_scale >= 0:
            raise DomainError("exposure scale must be non-negative")
        for wave in self.waves:
            self.lc.year_index(wave)
        for age in self.subgroup_ages:
            self.lc.age_index(age)


def truth_to_dict(truth: SyntheticTruth) -> dict:
    return {
        "kind": "synthetic_truth",
        "version": _FORMAT_VERSION,
        "lee_carter": lc_to_dict(truth.lc),
        "hermite": hermite_to_dict(truth.spec, truth.grid),
        "subgroup_ages": list(truth.subgroup_ages),
        "waves": {str(wave): length for wave, length in truth.waves.items()},
        "exposure_scale": truth.exposure_scale,
        "seed": truth.seed,
    }


def truth_from_dict(document: dict) -> SyntheticTruth:
    try:
        spec, grid = hermite_from_dict(document["hermite"])
        return SyntheticTruth(
            lc_from_dict(document["lee_carter"]),
            spec,
            grid,
            tuple(document["subgroup_ages"]),
            {int(wave): length for wave, length in document["waves"].items()},
            document["exposure_scale"],
            document["seed"],
        )
    except KeyError as ex:
        raise DataValidationError(f"missing field {ex.args[0]}") from None


def save_truth(truth: SyntheticTruth, path) -> None:
    write_json(truth_to_dict(truth), path)


def load_truth(path) -> SyntheticTruth:
    return truth_from_dict(_load(path, "synthetic_truth"))


def default_truth(exposure_scale: float = 1e8, seed: int = 0, ref_year: int = 2020,
                  national_ages=(50, 100), years=(1994, 2020)) -> SyntheticTruth:
    """A normalized national model with an ordered five-group HSM3 baseline."""
    ages = np.arange(national_ages[0], national_ages[1] + 1)
    span = np.arange(years[0], years[1] + 1)
    alpha = -5.3 + 0.085 * (ages - ages[0])
    # beta rises with age, where the deaths are
    raw = np.exp(0.05 * (ages - ages[0]))
    beta = raw / raw.sum()
    kappa = 0.77 * (ref_year - span) + 0.5 * np.sin(0.7 * (span - ref_year))
    lc = LCParams(ages, span, alpha, beta, kappa, ref_year)
    spec = HermiteSpec(
        HermiteVariant.HSM3,
        theta=(-4.6, -4.75, -4.9, -5.05, -5.2),
        omega=(-0.9,),
        mu0=(2.0, 2.2, 2.4, 2.6, 2.8),
        mu1=(0.5,),
    )
    return SyntheticTruth(lc, spec, exposure_scale=exposure_scale, seed=seed)


def generate_synthetic(truth: SyntheticTruth) -> tuple:
    """Poisson panels drawn from the exact model equations.

    National deaths are ``Poisson(E exp(alpha_x + beta_x kappa_t))`` with
    ``E = exposure_scale``. Subgroup deaths over a wave interval are
    ``Poisson(Delta l m)`` with ``l = exposure_scale`` and the group rate at
    the wave year, capped at ``l``.

    Returns
    -------
    tuple
        ``(NationalPanel, SubgroupPanel)``.
    """
    lc = truth.lc
    scale = float(truth.exposure_scale)
    exposure = np.full((len(lc.ages), len(lc.years)), scale)
    national_rng = substream(truth.seed, "synthetic-national")
    deaths = national_rng.poisson(exposure * np.exp(lc.log_m_surface())).astype(float)
    national = NationalPanel(lc.ages, lc.years, deaths, exposure)

    rows = []
    subgroup_rng = substream(truth.seed, "synthetic-subgroup")
    capped = 0
    for wave, length in sorted(truth.waves.items()):
        for j in range(1, truth.spec.groups + 1):
            for age in truth.subgroup_ages:
                rate = group_surface(truth.spec, lc, age, j, wave, truth.grid)
                drawn = float(subgroup_rng.poisson(length * scale * rate))
                if drawn > scale:
                    capped += 1
                    drawn = scale
                rows.append((age, j, wave, scale, drawn))
    if capped:
        _LOGGER.warning("%d subgroup cells capped at their exposure", capped)
    frame = pd.DataFrame(rows, columns=SUBGROUP_COLUMNS)
    subgroup = SubgroupPanel(
        frame["age"].to_numpy(),
        frame["quintile"].to_numpy(),
        frame["wave"].to_numpy(),
        frame["exposure"].to_numpy(),
        frame["deaths"].to_numpy(),
        truth.waves,
    )
    return national, subgroup
