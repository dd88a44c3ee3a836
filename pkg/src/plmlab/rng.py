"""Named RNG substreams fanned out from one root seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for ``name``; same (seed, name) gives the same stream."""
    return np.random.default_rng([int(seed) if seed is not None else 0, zlib.crc32(name.encode())])
