"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream, index)``. Streams are independent, so recording extra
diagnostics or changing the prune batch never shifts the training data.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "teacher": 0,
    "init": 1,
    "data": 2,
    "prune": 3,
    "finetune": 4,
    "aux": 5,
}


def generator(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, stream, index)``."""
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream], int(index)))
    return np.random.Generator(np.random.Philox(ss))
