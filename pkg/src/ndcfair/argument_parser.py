"""Parses the arguments for the ndcfair tool
"""

import argparse

from .hermite import HermiteVariant
from .settings import Settings, SubCommand


def _non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"{value} is negative")
    return number


class Arguments:
    """Parses the arguments for the ndcfair tool"""

    _HELP_EPILOG = """
    Use %(prog)s <subcommand> --help to get the subcommand specific help.

    Without --config all settings take their defaults: r = 7%%, phi = 2.4,
    reference year 2020, ages 50..120, retirement ages 60 and 63.
    """

    def __init__(self):
        self.tool_arguments = None
        self.version = "0.1.0"

    def parse(self, arguments=None) -> None:
        """Parses the ndcfair arguments

        Args:
            arguments (list): list of arguments to parse, ``sys.argv`` if None
        """
        parser = argparse.ArgumentParser(
            prog="ndcfair",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            description="Fair annuitization of notional defined contribution accounts (v"
            + self.version
            + ")",
            epilog=self._HELP_EPILOG,
        )

        parser.add_argument(
            "-c",
            "--config",
            default=None,
            metavar="FILE",
            type=argparse.FileType("r"),
            help="the configuration file (default: built-in defaults)",
        )
        parser.add_argument(
            "--seed",
            type=_non_negative_int,
            default=None,
            help="seed of all random draws, overrides the configuration",
        )
        parser.add_argument(
            "--r",
            dest="discount_rate",
            type=float,
            default=None,
            metavar="RATE",
            help="annual discount rate, overrides the configuration",
        )
        parser.add_argument(
            "--out",
            default=None,
            metavar="DIR",
            help="output directory, overrides the configuration",
        )
        parser.add_argument(
            "--anchors",
            default=None,
            metavar="FILE",
            help="YAML or JSON file with months, means and boundaries of the fair anchors",
        )
        parser.add_argument(
            "--log-level",
            choices=["critical", "error", "warning", "info", "debug"],
            default="warning",
            help="set the logging level (default: %(default)s)",
        )

        subparsers = parser.add_subparsers(
            dest="subcommand",
            required=True,
            title="subcommands",
            help="mode of the operation",
        )

        subparsers.add_parser("synth", help="generate a synthetic dataset and its truth")
        subparsers.add_parser("fit-national", help="fit the national Lee-Carter model")
        parser_subgroup = subparsers.add_parser(
            "fit-subgroup", help="fit the group baselines and compare the variants"
        )
        parser_subgroup.add_argument(
            "--variant",
            action="append",
            choices=[v.value for v in HermiteVariant],
            default=[],
            help="variant to fit, may be repeated (default: from the configuration)",
        )
        subparsers.add_parser("fair-cm", help="tabulate fair counting months and subsidies")
        subparsers.add_parser("project", help="project median fair counting months")
        subparsers.add_parser(
            "calibrate-rules", help="calibrate the four income-dependent rules"
        )
        subparsers.add_parser(
            "evaluate-rules", help="evaluate the rules on a dense income grid"
        )
        subparsers.add_parser("check", help="check the configuration file")

        self.tool_arguments = vars(parser.parse_args(arguments))

    def to_settings(self) -> Settings:
        """Convert the parsed arguments to the settings class"""
        settings = Settings()

        settings.subcommand = SubCommand.from_command(self.tool_arguments["subcommand"])
        settings.configuration_stream = self.tool_arguments["config"]
        settings.seed = self.tool_arguments["seed"]
        settings.discount_rate = self.tool_arguments["discount_rate"]
        settings.output_directory = self.tool_arguments["out"]
        settings.anchors_path = self.tool_arguments["anchors"]
        settings.log_level = self.tool_arguments["log_level"].upper()
        if "variant" in self.tool_arguments:
            settings.variants = list(self.tool_arguments["variant"])

        return settings
