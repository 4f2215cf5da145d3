"""Seeded random streams.

All randomness flows through numpy's PCG64 bit generator, whose output
stream is fixed by its documented algorithm and therefore identical on every
platform.  Independent substreams are derived with ``SeedSequence`` spawn
keys so that adding a consumer in one stage never perturbs another.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed, *stream):
    """Generator for ``seed`` restricted to the substream named by ``stream``.

    Stream parts may be ints or strings (strings are hashed with CRC-32).
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(rng):
    """Draw a 63-bit seed from ``rng`` for handing to a child stream."""
    return int(rng.integers(0, 2**63 - 1))
