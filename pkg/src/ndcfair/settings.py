"""Holds the settings for the tool.
"""

from enum import Enum


class SubCommand(Enum):
    """Defines the sub-command enum for the ndcfair tool."""

    NOTSET = 0
    SYNTH = 1
    FIT_NATIONAL = 2
    FIT_SUBGROUP = 3
    FAIR_CM = 4
    PROJECT = 5
    CALIBRATE_RULES = 6
    EVALUATE_RULES = 7
    CHECK = 8

    @property
    def command(self) -> str:
        """Name of the sub-command on the command line."""
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_command(cls, command: str) -> "SubCommand":
        return cls[command.upper().replace("-", "_")]


class Settings:
    """Contains settings provided by either the command line or via other means.

    Attributes
    ----------

    subcommand : SubCommand
        The sub-command to run.
    configuration_stream : io.IOBase | str | None
        The configuration file or string; ``None`` runs on the defaults.
    seed : int | None
        Overrides the configured seed.
    discount_rate : float | None
        Overrides the configured discount rate.
    output_directory : str | None
        Overrides the configured output directory.
    anchors_path : str | None
        File with fair anchors, overriding the configured ones.
    log_level : str
        Logging level that can be parsed by ``logging.basicConfig``.
    variants : list
        Baseline variants to fit, empty for the configured ones.
    """

    def __init__(self):
        self.subcommand = SubCommand.NOTSET
        self.configuration_stream = None
        self.seed = None
        self.discount_rate = None
        self.output_directory = None
        self.anchors_path = None
        self.log_level = "WARNING"
        self.variants = []
