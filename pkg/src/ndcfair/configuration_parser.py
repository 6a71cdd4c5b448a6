"""Parses the configuration for the ndcfair tool
"""

import io
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType

from schema import SchemaError
from yaml import FullLoader, load

from .configuration_validator import validate
from .subgroup_fit import DEFAULT_WAVES


@dataclass(frozen=True)
class RunConfig:
    """Immutable settings of one run: the configuration file merged with
    the command-line overrides.

    All defaults are the valuation basis of the fair counting-month tables:
    ``r = 7%``, ``phi = 2.4``, reference year 2020 with ``kappa_2020 = 0``,
    ages 50..120 and retirement at 60 and 63.
    """

    discount_rate: float = 0.07
    account_scale: float = 2.4
    limit_age: int = 120
    ref_year: int = 2020
    x0: int = 50
    x1: int = 120
    retirement_ages: tuple = (60, 63)
    groups: int = 5
    waves: MappingProxyType = field(default=DEFAULT_WAVES)
    baseline_variant: str = "HSM3"
    variants: tuple = ("HSM1", "HSM2", "HSM3", "HSM4")
    horizon: int = 2040
    n_paths: int = 1000
    seed: int = 0
    national_path: str = None
    subgroup_path: str = None
    lee_carter_path: str = None
    hermite_path: str = None
    anchors_path: str = None
    anchors: MappingProxyType = None
    output_directory: str = "."
    grid_start: float = 500.0
    grid_stop: float = 120000.0
    grid_step: float = 100.0
    marginal_step: float = 100.0
    official_month: float = 139.0
    exposure_scale: float = 1e8
    synthetic_ages: tuple = (50, 100)
    synthetic_years: tuple = (1994, 2020)

    def output(self, name: str) -> str:
        """Path of an artifact in the output directory."""
        return os.path.join(self.output_directory, name)

    @property
    def lee_carter_file(self) -> str:
        return self.lee_carter_path or self.output("lee_carter.json")

    @property
    def hermite_file(self) -> str:
        return self.hermite_path or self.output(f"hermite_{self.baseline_variant}.json")

    @property
    def income_grid_size(self) -> int:
        """Points of the rule-evaluation grid ``start, start + step, ..., stop``."""
        return int(math.floor((self.grid_stop - self.grid_start) / self.grid_step + 1e-9)) + 1


class Configuration:
    """Parses the configuration given by a stream

    Attributes
    ----------

    configuration : dict
        A parsed and validated configuration.
    metrics_path : str | None
        Prometheus textfile to write after the run, if configured.
    """

    def __init__(self):
        self.configuration = None
        self.metrics_path = None

    def load(self, stream, close=True) -> None:
        """Loads, parses and validates the configuration from a stream.

        Parameters
        ----------
        stream : io.IOBase | str | None
            Stream to read the configuration from; ``None`` for the defaults.
        close : bool, optional
            If the stream is an instance of io.IOBase and the close argument is True,
            it will be closed. The default is True.

        Raises
        ------
        ValueError
            If the configuration is invalid.
        """
        try:
            config = load(stream, Loader=FullLoader) if stream is not None else None
        except Exception as ex:
            raise ValueError(
                "configuration invalid\n" + str(ex.with_traceback(None))
            ) from None

        if isinstance(stream, io.IOBase) and close:
            stream.close()

        try:
            self.configuration = validate(config)
        except SchemaError as ex:
            raise ValueError(
                "configuration invalid\n" + str(ex.with_traceback(None))
            ) from None

        self.metrics_path = None
        if "metrics" in self.configuration:
            self.metrics_path = os.path.join(
                self.configuration["metrics"]["directory"], "ndcfair"
            )

            if "suffix" in self.configuration["metrics"]:
                self.metrics_path += "-" + self.configuration["metrics"]["suffix"]

            self.metrics_path += ".prom"

    def _section(self, name: str) -> dict:
        return self.configuration.get(name, {})

    def run_config(self, settings=None) -> RunConfig:
        """Merge the configuration with the command-line overrides.

        Parameters
        ----------
        settings : Settings, optional
            Overrides for the seed, discount rate, output directory and
            anchors file; ``None`` values keep the configuration.

        Returns
        -------
        RunConfig
            The merged, immutable settings.
        """
        valuation = self._section("valuation")
        model = self._section("model")
        projection = self._section("projection")
        inputs = self._section("inputs")
        rules = self._section("rules")
        synthetic = self._section("synthetic")
        grid = model.get("age_grid", {})
        rule_grid = rules.get("grid", {})

        values = {
            "discount_rate": valuation.get("discount_rate"),
            "account_scale": valuation.get("account_scale"),
            "limit_age": valuation.get("limit_age"),
            "ref_year": model.get("ref_year"),
            "x0": grid.get("x0"),
            "x1": grid.get("x1"),
            "retirement_ages": _tuple(model.get("retirement_ages")),
            "groups": model.get("groups"),
            "waves": _mapping(model.get("waves")),
            "baseline_variant": model.get("baseline_variant"),
            "variants": _tuple(model.get("variants")),
            "horizon": projection.get("horizon"),
            "n_paths": projection.get("n_paths"),
            "seed": self.configuration.get("seed"),
            "national_path": inputs.get("national"),
            "subgroup_path": inputs.get("subgroup"),
            "lee_carter_path": inputs.get("lee_carter"),
            "hermite_path": inputs.get("hermite"),
            "anchors_path": inputs.get("anchors"),
            "anchors": _mapping(self.configuration.get("anchors")),
            "output_directory": self._section("output").get("directory"),
            "grid_start": rule_grid.get("start"),
            "grid_stop": rule_grid.get("stop"),
            "grid_step": rule_grid.get("step"),
            "marginal_step": rules.get("marginal_step"),
            "official_month": rules.get("official_month"),
            "exposure_scale": synthetic.get("exposure_scale"),
            "synthetic_ages": _tuple(synthetic.get("national_ages")),
            "synthetic_years": _tuple(synthetic.get("years")),
        }

        if settings is not None:
            values["seed"] = _override(values["seed"], settings.seed)
            values["discount_rate"] = _override(values["discount_rate"], settings.discount_rate)
            values["output_directory"] = _override(
                values["output_directory"], settings.output_directory
            )
            values["anchors_path"] = _override(values["anchors_path"], settings.anchors_path)
            if settings.variants:
                values["variants"] = tuple(settings.variants)

        config = RunConfig(**{k: v for k, v in values.items() if v is not None})
        if config.limit_age != config.x1:
            raise ValueError(
                f"configuration invalid\nlimit_age {config.limit_age} differs "
                f"from the age grid end {config.x1}"
            )
        return config

    def metrics_dir_exists(self) -> bool:
        """Checks whether the metrics directory exists

        Returns:
            bool: The configuration specifies the metrics directory and it exists.
        """
        return (
            "metrics" in self.configuration
            and os.path.exists(self.configuration["metrics"]["directory"])
            and os.path.isdir(
                os.path.realpath(self.configuration["metrics"]["directory"])
            )
        )


def _override(configured, overriding):
    return overriding if overriding is not None else configured


def _tuple(values):
    return tuple(values) if values is not None else None


def _mapping(values):
    return MappingProxyType(dict(values)) if values is not None else None
