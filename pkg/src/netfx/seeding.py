"""Deterministic derivation of independent seeds from one master seed.

Hashing the master seed together with string tags gives stable,
platform-independent integer seeds that can be recorded in output files,
which SeedSequence spawn keys would not give us as plainly.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *tags: object) -> int:
    """Map ``(master, tags...)`` to a 63-bit seed, stable across runs.

    Different tag tuples give independent streams for numpy's PCG64, so
    stages (graph, parameters, treatments, ...) and repetition indices can
    each draw from their own generator without coupling.
    """
    text = "|".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
