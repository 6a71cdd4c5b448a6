"""
Expose the figures of a run as prometheus metrics in the textfile format
"""

from prometheus_client import CollectorRegistry, Gauge, write_to_textfile


class Metrics:
    """
    Collects stage durations, fit diagnostics and calibration objectives
    """

    def __init__(self, metrics_path: str):
        """Initialize metrics collector

        Args:
            metrics_path (str): File the metrics are written to
        """
        self.metrics_path = metrics_path
        self.registry = CollectorRegistry()
        self.stage_duration = Gauge(
            "ndcfair_stage_duration_seconds",
            "Duration of a stage of the run.",
            ["command", "stage"],
            registry=self.registry,
        )
        self.fit_log_likelihood = Gauge(
            "ndcfair_fit_log_likelihood",
            "Poisson log-likelihood of a fitted model.",
            ["model"],
            registry=self.registry,
        )
        self.fit_iterations = Gauge(
            "ndcfair_fit_iterations",
            "Iterations used by a fit.",
            ["model"],
            registry=self.registry,
        )
        self.calibration_objective = Gauge(
            "ndcfair_calibration_objective",
            "Squared proportional anchor error of a calibrated rule.",
            ["rule"],
            registry=self.registry,
        )

    def set_stage(self, command: str, stage: str, seconds: float):
        self.stage_duration.labels(command, stage).set(round(seconds, 3))

    def set_fit(self, model: str, log_likelihood: float, iterations: int):
        """Record the diagnostics of a fit

        Args:
            model (str): ``lee_carter`` or a baseline variant
            log_likelihood (float): Log-likelihood at the estimate
            iterations (int): Iterations of the optimizer
        """
        self.fit_log_likelihood.labels(model).set(log_likelihood)
        self.fit_iterations.labels(model).set(iterations)

    def set_schedules(self, schedules):
        """Record the objectives of calibrated rules

        Args:
            schedules (iterable): RuleSchedule objects
        """
        for schedule in schedules:
            self.calibration_objective.labels(schedule.kind.value).set(schedule.objective)

    def write_to_file(self):
        """Atomically write the metrics to the file"""

        write_to_textfile(self.metrics_path, self.registry)
