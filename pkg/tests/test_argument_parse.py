"""Test argument parsing"""

import pytest
from pyfakefs import fake_filesystem_unittest

from ndcfair.argument_parser import Arguments
from ndcfair.settings import SubCommand


class TestArgumentParser(fake_filesystem_unittest.TestCase):
    """Test argument parsing"""

    def setUp(self):
        self.parser = Arguments()
        self.setUpPyfakefs()
        with open("/config.yml", "w", encoding="utf8") as file:
            file.write("# Comment")

    def test_defaults(self):
        """Test default arguments"""
        self.parser.parse(["check"])
        self.assertIsNone(self.parser.tool_arguments["config"])
        self.assertIsNone(self.parser.tool_arguments["seed"])
        self.assertIsNone(self.parser.tool_arguments["discount_rate"])
        self.assertIsNone(self.parser.tool_arguments["out"])
        self.assertIsNone(self.parser.tool_arguments["anchors"])
        self.assertEqual(self.parser.tool_arguments["log_level"], "warning")
        self.assertEqual(self.parser.tool_arguments["subcommand"], "check")

    def test_common(self):
        """Test setting of common arguments"""
        self.parser.parse(
            [
                "-c",
                "/config.yml",
                "--seed",
                "42",
                "--r",
                "0.03",
                "--out",
                "/results",
                "--anchors",
                "/anchors.yaml",
                "--log-level",
                "debug",
                "calibrate-rules",
            ]
        )
        self.assertEqual(self.parser.tool_arguments["config"].name, "/config.yml")
        self.assertEqual(self.parser.tool_arguments["seed"], 42)
        self.assertEqual(self.parser.tool_arguments["discount_rate"], 0.03)
        self.assertEqual(self.parser.tool_arguments["out"], "/results")
        self.assertEqual(self.parser.tool_arguments["anchors"], "/anchors.yaml")
        self.assertEqual(self.parser.tool_arguments["log_level"], "debug")

    def test_subcommands(self):
        """Every sub-command maps to its enum member"""
        for subcommand in SubCommand:
            if subcommand == SubCommand.NOTSET:
                continue
            self.parser.parse([subcommand.command])
            self.assertEqual(self.parser.to_settings().subcommand, subcommand)

    def test_variants(self):
        """Variants may be repeated"""
        self.parser.parse(["fit-subgroup", "--variant", "HSM3", "--variant", "HSM4"])
        self.assertEqual(self.parser.to_settings().variants, ["HSM3", "HSM4"])

        self.parser.parse(["fit-subgroup"])
        self.assertEqual(self.parser.to_settings().variants, [])

    def test_gompertz_variants(self):
        """Gompertz variants are offered next to the Hermite ones"""
        self.parser.parse(
            ["fit-subgroup", "--variant", "GompertzFree", "--variant", "GompertzConstrained"]
        )
        self.assertEqual(
            self.parser.to_settings().variants, ["GompertzFree", "GompertzConstrained"]
        )

    def test_unknown_variant(self):
        """Unknown variants are rejected"""
        with pytest.raises(SystemExit) as info:
            self.parser.parse(["fit-subgroup", "--variant", "HSM5"])
        self.assertEqual(info.value.code, 2)

    def test_negative_seed(self):
        """Seeds are non-negative"""
        with pytest.raises(SystemExit):
            self.parser.parse(["--seed", "-1", "synth"])

    def test_missing_subcommand(self):
        """A sub-command is required"""
        with pytest.raises(SystemExit):
            self.parser.parse([])

    def test_missing_config(self):
        """The configuration file must exist"""
        with pytest.raises(SystemExit):
            self.parser.parse(["-c", "/nonexistent.yml", "check"])

    def test_settings(self):
        """Test the conversion to settings"""
        self.parser.parse(
            ["--seed", "7", "--r", "0.05", "--out", "/results", "--log-level", "info", "project"]
        )
        settings = self.parser.to_settings()
        self.assertEqual(settings.subcommand, SubCommand.PROJECT)
        self.assertIsNone(settings.configuration_stream)
        self.assertEqual(settings.seed, 7)
        self.assertEqual(settings.discount_rate, 0.05)
        self.assertEqual(settings.output_directory, "/results")
        self.assertIsNone(settings.anchors_path)
        self.assertEqual(settings.log_level, "INFO")
        self.assertEqual(settings.variants, [])
