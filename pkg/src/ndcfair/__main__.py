"""Allows to run the tool as ``python -m ndcfair ...``
"""

from .entry_point import run

if __name__ == "__main__":
    run()
