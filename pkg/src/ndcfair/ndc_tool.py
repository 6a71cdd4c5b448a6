"""
Fetch the arguments, parse the configuration and run the selected functionality
"""

import dataclasses
import logging
import logging.config
import os
import time
import traceback

import numpy as np
import pandas as pd
import yaml

from .annuity import AnnuityBasis, fair_cm_table
from .configuration_parser import Configuration
from .data_io import (
    anchors_from_dict,
    default_truth,
    generate_synthetic,
    load_anchors,
    load_hermite,
    load_lc,
    read_national_csv,
    read_subgroup_csv,
    save_hermite,
    save_lc,
    save_schedule,
    save_truth,
    write_csv,
    write_json,
    write_national_csv,
    write_official_csv,
    write_subgroup_csv,
)
from .exceptions import DataValidationError, DomainError, InfeasibleScheduleError
from .hermite import AgeGrid, HermiteVariant, check_non_crossover
from .metrics import Metrics
from .national_lc import fit_lc_poisson
from .projection import fit_rwd, project_fair_cm, simulate_kappa
from .rules import (
    DEFAULT_ANCHORS,
    DEFAULT_QUINTILES,
    AnchorBenchmark,
    MortalityBenchmark,
    calibrate_all,
    evaluation_table,
    method3_exact,
    method3_feasibility,
    method4_exact,
    method4_feasibility,
)
from .settings import Settings, SubCommand
from .subgroup_fit import ShapeConstraints, build_pooled, fit_gompertz, fit_hsm, model_scores

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2


class NdcToolException(Exception):
    """Throw if an error prevents the tool to continue. If invoked from a command
    line exit with the code provided.
    """

    def __init__(self, code: int, description: str, error: str = None, row: int = None):
        super().__init__(description)
        self.exit_code = code
        self.description = description
        self.error = error or type(self).__name__
        self.row = row

    def __str__(self):
        return self.description

    def record(self) -> dict:
        """Machine-readable form of the failure."""
        return {
            "error": self.error,
            "message": self.description,
            "exit_code": self.exit_code,
            "row": self.row,
        }


def exit_code_of(ex: Exception) -> int:
    """Validation failures exit with 2, everything else with 1."""
    if isinstance(ex, NdcToolException):
        return ex.exit_code
    if isinstance(ex, (ValueError, FileNotFoundError)):
        return EXIT_VALIDATION
    return EXIT_INTERNAL


class ContextFilter(logging.Filter):
    """Fills the run context extras of records that come without them."""

    def __init__(self, operation: str = "-"):
        super().__init__()
        self.operation = operation

    def filter(self, record):
        if not hasattr(record, "operation"):
            record.operation = self.operation
        if not hasattr(record, "stage"):
            record.stage = "-"
        if not hasattr(record, "elapsed"):
            record.elapsed = 0.0
        return True


def _finite(value):
    return float(value) if np.isfinite(value) else None


def _steps(steps) -> list:
    return [
        {
            "step": step.step,
            "lower": _finite(step.lower),
            "upper": _finite(step.upper),
            "target": _finite(step.target),
            "violated": step.side,
        }
        for step in steps
    ]


def _crossover_rows(name: str, spec, check) -> list:
    """One row per ordered group pair ``i < j`` of a fitted specification."""
    violations = set(check.violations)
    endpoint_violations = set(check.endpoint_violations)
    rows = []
    for i in range(1, spec.groups + 1):
        theta_i, _, mu0_i, _ = spec.coefficients(i)
        for j in range(i + 1, spec.groups + 1):
            theta_j, _, mu0_j, _ = spec.coefficients(j)
            rows.append(
                (
                    name,
                    i,
                    j,
                    mu0_j - mu0_i,
                    -3.0 * (theta_j - theta_i),
                    (i, j) not in violations,
                    (i, j) not in endpoint_violations,
                )
            )
    return rows


class NdcTool:
    """Runs the estimation, valuation and rule calibration steps

    Parameters
    ----------
    settings : Settings
        Set of the parameters defining the tool configuration.
        It can be either derived from the :class:`.Arguments`
        or set explicitly.
    """

    def __init__(self, settings: Settings):
        self.settings = settings
        self.configuration = None
        self.run_config = None
        self.metrics = None

    def log(self, log_function, *args, stage=None, elapsed=None):
        """Log the message, filling out the extras.

        Parameters
        ----------
        log_function : callable
            logging.error etc.
        args : Any
            Arguments for the logging function
        stage : str | None
            Stage of the command (fit, write, ...), if known
        elapsed : float | None
            Elapsed time of the stage, if known
        """
        log_function(
            *args,
            extra={
                "operation": self.settings.subcommand.command,
                "stage": stage if stage is not None else "-",
                "elapsed": elapsed if elapsed is not None else 0.0,
            },
        )

    def format_exception(self, ex: Exception):
        """Return the formatted exception with the traceback stripped"""
        return str(
            [
                x.strip().replace("\n", " ")
                for x in traceback.format_exception(type(ex), ex, None, limit=0)
            ]
        )

    def _attach_context(self):
        for handler in logging.getLogger().handlers:
            handler.addFilter(ContextFilter(self.settings.subcommand.command))

    def configure_default_logging(self):
        """Configures the default logging"""
        logging_config = yaml.safe_load(
            """
version: 1
disable_existing_loggers: false
root:
    handlers:
        - console
handlers:
    console:
        class: logging.StreamHandler
        formatter: detailed
        stream: ext://sys.stderr
formatters:
    detailed:
        format: '%(asctime)s %(levelname)s op=%(operation)s stage=%(stage)s msg=%(message)s'
        datefmt: '%Y-%m-%d %H:%M:%S'
"""
        )

        logging_config["root"]["level"] = self.settings.log_level
        logging.config.dictConfig(logging_config)
        self._attach_context()

    def setup(self):
        """Reads and validates the configuration and prepares the tool.

        Raises
        ------
        NdcToolException
            If the configuration could not be loaded or is invalid or if
            the settings specify an unsupported operation.
        """

        self.configuration = Configuration()

        try:
            self.configuration.load(self.settings.configuration_stream)
        except Exception as ex:
            logging.fatal(
                "Could not load the configuration %s", self.format_exception(ex)
            )
            raise NdcToolException(
                EXIT_VALIDATION, str(ex), "ConfigurationError"
            ) from ex

        if "logging" in self.configuration.configuration:
            logging_config = self.configuration.configuration["logging"]
            try:
                logging_config["handlers"]["console"]["level"] = self.settings.log_level
            except Exception:  # pylint: disable=broad-except
                pass

            try:
                logging.config.dictConfig(logging_config)
                self._attach_context()
            except Exception as ex:  # pylint: disable=broad-except
                self.configure_default_logging()
                self.log(
                    logging.error,
                    "Unable to configure logging, falling back to default: %s",
                    self.format_exception(ex),
                )
        else:
            self.configure_default_logging()

        try:
            self.run_config = self.configuration.run_config(self.settings)
        except ValueError as ex:
            self.log(logging.fatal, "Invalid settings %s", self.format_exception(ex))
            raise NdcToolException(EXIT_VALIDATION, str(ex), "ConfigurationError") from ex

        if self.settings.subcommand not in self._command_mux():
            self.log(logging.fatal, "Unknown command %s", self.settings.subcommand.name)
            raise NdcToolException(
                EXIT_VALIDATION, f"Unknown command {self.settings.subcommand.name}"
            )

        if self.configuration.metrics_path:
            self.metrics = Metrics(self.configuration.metrics_path)

    def _command_mux(self) -> dict:
        return {
            SubCommand.CHECK: self._run_check,
            SubCommand.SYNTH: self._run_synth,
            SubCommand.FIT_NATIONAL: self._run_fit_national,
            SubCommand.FIT_SUBGROUP: self._run_fit_subgroup,
            SubCommand.FAIR_CM: self._run_fair_cm,
            SubCommand.PROJECT: self._run_project,
            SubCommand.CALIBRATE_RULES: self._run_calibrate_rules,
            SubCommand.EVALUATE_RULES: self._run_evaluate_rules,
        }

    def run(self):
        """Runs the tool according to the settings and the configuration.

        Raises
        ------
        NdcToolException
            With exit code 2 on invalid input, 1 on any other failure.
        """
        start_time = time.monotonic()
        try:
            self._command_mux()[self.settings.subcommand]()
        except NdcToolException:
            raise
        except Exception as ex:  # pylint: disable=broad-except
            code = exit_code_of(ex)
            self.log(
                logging.error,
                "Command failed: %s",
                self.format_exception(ex),
                elapsed=time.monotonic() - start_time,
            )
            raise NdcToolException(
                code,
                str(ex),
                type(ex).__name__,
                ex.row if isinstance(ex, DataValidationError) else None,
            ) from ex

        elapsed = time.monotonic() - start_time
        self.log(logging.info, "Command finished", elapsed=elapsed)
        if self.metrics is not None:
            self.metrics.set_stage(self.settings.subcommand.command, "total", elapsed)
            self._write_metrics()

    def _write_metrics(self):
        if self.configuration.metrics_dir_exists():
            try:
                self.metrics.write_to_file()
                self.log(logging.debug, "Successfully generated the metrics", stage="metrics")
            except Exception as ex:  # pylint: disable=broad-except
                self.log(
                    logging.error,
                    "Writing the metrics failed: %s",
                    self.format_exception(ex),
                    stage="metrics",
                )
        else:
            self.log(
                logging.warning,
                "Metrics directory does not exist or is not a directory, no metrics generated",
                stage="metrics",
            )

    def _stage(self, stage: str, start_time: float):
        elapsed = time.monotonic() - start_time
        self.log(logging.info, "Stage done", stage=stage, elapsed=elapsed)
        if self.metrics is not None:
            self.metrics.set_stage(self.settings.subcommand.command, stage, elapsed)

    def _output(self, name: str) -> str:
        os.makedirs(self.run_config.output_directory, exist_ok=True)
        return self.run_config.output(name)

    @staticmethod
    def _require(path: str, key: str) -> str:
        if not path:
            raise NdcToolException(EXIT_VALIDATION, f"{key} is not configured", "ConfigurationError")
        return path

    def _grid(self) -> AgeGrid:
        return AgeGrid(self.run_config.x0, self.run_config.x1)

    def _basis(self) -> AnnuityBasis:
        return AnnuityBasis(self.run_config.discount_rate, self.run_config.limit_age)

    def _models(self) -> tuple:
        """``(LCParams, HermiteSpec, AgeGrid)`` of the fitted model files."""
        lc = load_lc(self.run_config.lee_carter_file)
        spec, grid = load_hermite(self.run_config.hermite_file)
        return lc, spec, grid

    def _has_models(self) -> bool:
        return os.path.isfile(self.run_config.lee_carter_file) and os.path.isfile(
            self.run_config.hermite_file
        )

    def _anchors(self) -> tuple:
        """``(FairAnchors, IncomeQuintiles, source)`` by precedence: anchors
        file, configured anchors, fitted models, built-in anchors."""
        config = self.run_config
        if config.anchors_path:
            return (*load_anchors(config.anchors_path), "file")
        if config.anchors is not None:
            return (*anchors_from_dict(config.anchors), "configuration")
        if self._has_models():
            benchmark = self._mortality_benchmark(DEFAULT_QUINTILES)
            return benchmark.anchor_months(), DEFAULT_QUINTILES, "model"
        self.log(logging.info, "No anchors given, using the built-in 2020 anchors")
        return DEFAULT_ANCHORS, DEFAULT_QUINTILES, "built-in"

    def _mortality_benchmark(self, quintiles) -> MortalityBenchmark:
        lc, spec, grid = self._models()
        return MortalityBenchmark(
            spec, lc, quintiles, age=60, year=self.run_config.ref_year,
            basis=AnnuityBasis(self.run_config.discount_rate, grid.x1), grid=grid,
        )

    def _run_check(self):
        self.log(logging.info, "Configuration is valid")  # Would not come here if invalid

    def _run_synth(self):
        config = self.run_config
        start_time = time.monotonic()
        truth = default_truth(
            config.exposure_scale,
            config.seed,
            config.ref_year,
            config.synthetic_ages,
            config.synthetic_years,
        )
        truth = dataclasses.replace(truth, grid=self._grid(), waves=config.waves)
        national, subgroup = generate_synthetic(truth)
        self._stage("generate", start_time)

        write_national_csv(national, self._output("national.csv"))
        write_subgroup_csv(subgroup, self._output("subgroup.csv"))
        save_truth(truth, self._output("truth.json"))
        self.log(logging.info, "Synthetic dataset written to %s", config.output_directory)

    def _run_fit_national(self):
        config = self.run_config
        panel = read_national_csv(self._require(config.national_path, "inputs.national"))
        start_time = time.monotonic()
        params, report = fit_lc_poisson(panel, config.ref_year)
        self._stage("fit", start_time)

        save_lc(params, self._output("lee_carter.json"))
        write_json(
            {
                "log_likelihood": report.log_likelihood,
                "deviance": report.deviance,
                "iterations": report.iterations,
                "gradient_norm": report.gradient_norm,
                "trace": list(report.trace),
            },
            self._output("lee_carter_report.json"),
        )
        if self.metrics is not None:
            self.metrics.set_fit("lee_carter", report.log_likelihood, report.iterations)

    def _run_fit_subgroup(self):
        config = self.run_config
        lc = load_lc(config.lee_carter_file)
        panel = read_subgroup_csv(
            self._require(config.subgroup_path, "inputs.subgroup"), config.waves, config.groups
        )
        cells = build_pooled(panel, lc)
        grid = self._grid()

        rows = []
        pairs = []
        for name in config.variants:
            variant = HermiteVariant(name)
            start_time = time.monotonic()
            if variant.is_gompertz:
                spec, report = fit_gompertz(cells, variant, grid)
            else:
                spec, report = fit_hsm(
                    cells, variant, ShapeConstraints(), grid, seed=config.seed
                )
            self._stage(f"fit-{name}", start_time)
            save_hermite(spec, self._output(f"hermite_{name}.json"), grid)
            aic, bic = model_scores(report)
            crossover = check_non_crossover(spec)
            rows.append(
                (
                    name,
                    report.log_likelihood,
                    report.k,
                    report.n_cells,
                    aic,
                    bic,
                    report.converged,
                    crossover.ok,
                )
            )
            pairs.extend(_crossover_rows(name, spec, crossover))
            if self.metrics is not None:
                self.metrics.set_fit(name, report.log_likelihood, report.iterations)

        write_csv(
            pd.DataFrame(
                rows,
                columns=[
                    "variant", "log_likelihood", "parameters", "cells",
                    "aic", "bic", "converged", "non_crossover",
                ],
            ),
            self._output("model_scores.csv"),
        )
        write_csv(
            pd.DataFrame(
                pairs,
                columns=[
                    "variant", "i", "j", "mu0_gap", "bound", "non_crossover", "omega_ordered",
                ],
            ),
            self._output("crossover_pairs.csv"),
        )

    def _run_fair_cm(self):
        config = self.run_config
        lc, spec, grid = self._models()
        table = fair_cm_table(
            spec, lc, config.ref_year, config.retirement_ages,
            AnnuityBasis(config.discount_rate, grid.x1), grid,
        )
        write_csv(table, self._output("fair_cm.csv"))
        write_official_csv(self._output("official_counting_months.csv"))

    def _run_project(self):
        config = self.run_config
        lc, spec, grid = self._models()
        start_time = time.monotonic()
        paths = simulate_kappa(
            fit_rwd(lc.kappa),
            lc.kappa_at(config.ref_year),
            config.horizon - config.ref_year,
            config.n_paths,
            config.seed,
            base_year=config.ref_year,
        )
        self._stage("simulate", start_time)
        frame = project_fair_cm(
            spec, lc, paths, config.retirement_ages,
            AnnuityBasis(config.discount_rate, grid.x1), grid,
        )
        self._stage("value", start_time)
        write_csv(frame, self._output("projection.csv"))

    def _calibrate(self) -> tuple:
        anchors, quintiles, source = self._anchors()
        start_time = time.monotonic()
        schedules = calibrate_all(anchors, quintiles, source, self.run_config.seed)
        self._stage("calibrate", start_time)
        if self.metrics is not None:
            self.metrics.set_schedules(schedules.values())
        return anchors, quintiles, source, schedules

    def _run_calibrate_rules(self):
        anchors, quintiles, source, schedules = self._calibrate()
        for kind, schedule in schedules.items():
            save_schedule(schedule, self._output(f"rule_{kind.value}.json"))

        diagnostics = {
            "source": source,
            "anchors": list(anchors.months),
            "normalized_benefits": anchors.normalized_benefits(quintiles).tolist(),
            "objectives": {kind.value: s.objective for kind, s in schedules.items()},
            "method3_feasibility": _steps(method3_feasibility(anchors, quintiles)),
            "method4_feasibility": _steps(method4_feasibility(anchors, quintiles)),
        }
        for name, exact in (("method3_exact", method3_exact), ("method4_exact", method4_exact)):
            try:
                diagnostics[name] = list(exact(anchors, quintiles).deltas)
            except InfeasibleScheduleError as ex:
                self.log(logging.warning, "%s: %s", name, ex)
                diagnostics[name] = {"bracket": ex.bracket, "violated": ex.side}
        write_json(diagnostics, self._output("rules_diagnostics.json"))

    def _run_evaluate_rules(self):
        config = self.run_config
        anchors, quintiles, _, schedules = self._calibrate()
        if self._has_models():
            benchmark = self._mortality_benchmark(quintiles)
        else:
            benchmark = AnchorBenchmark(anchors, quintiles)

        incomes = config.grid_start + config.grid_step * np.arange(config.income_grid_size)
        if len(incomes) < 1:
            raise DomainError("the income grid is empty")
        table = evaluation_table(
            schedules.values(), benchmark, incomes, config.account_scale,
            h=config.marginal_step, official_month=config.official_month,
        )
        write_csv(table, self._output("rules_evaluation.csv"))
        worst = table.groupby("method")["residual_subsidy"].apply(lambda s: s.abs().max())
        for method, value in worst.items():
            self.log(logging.info, "method %d: max |residual subsidy| %.4f", method, value)
