"""Named, counter-based random substreams.

Every random draw of a run comes from ``substream(seed, name, index)``: a
Philox generator keyed by the run seed, a stage name and an index (path,
start, ...). Draws for one index never depend on how many others exist.
"""

import zlib

import numpy as np


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return the generator of substream ``(name, index)`` of ``seed``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")), int(index))
    )
    return np.random.Generator(np.random.Philox(sequence))
