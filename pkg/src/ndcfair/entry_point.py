"""Main entry point used by both setuptools script and the package's
top-level ``__main__``.
"""

import json
import sys

from .argument_parser import Arguments
from .ndc_tool import EXIT_INTERNAL, NdcTool, NdcToolException

# pylint: disable=broad-except


def _error_record(record: dict) -> None:
    sys.stderr.write(json.dumps(record) + "\n")


def run(arguments=None):
    """Fetch and parse the command-line arguments and run the tool.

    Exits with 0 on success, 2 on a validation failure and 1 on any other
    failure; failures also write a one-line JSON error record to stderr.
    """

    try:
        parsed = Arguments()
        parsed.parse(arguments)

        tool = NdcTool(parsed.to_settings())
        tool.setup()
        tool.run()
    except NdcToolException as ex:
        _error_record(ex.record())
        sys.exit(ex.exit_code)
    except Exception as ex:
        _error_record(
            {
                "error": type(ex).__name__,
                "message": str(ex.with_traceback(None)),
                "exit_code": EXIT_INTERNAL,
                "row": None,
            }
        )
        sys.exit(EXIT_INTERNAL)
