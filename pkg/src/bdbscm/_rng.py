"""Deterministic RNG streams keyed by ``(seed, *key)``.

Every random quantity in the package comes from one of these streams, so a
result depends only on the seed and the logical position of the work item
(chain index, replicate index), never on scheduling.
"""

import hashlib

import numpy as np

# Stage tags keep streams of different pipeline stages disjoint for one seed.
STAGE_MCMC = 1
STAGE_PREDICTIVE = 2
STAGE_EM = 3
STAGE_SYNTH = 4
STAGE_OC = 5
STAGE_PROB = 6


def stream(seed, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, label: str) -> int:
    """Sub-seed for a named pipeline stage (stable across platforms)."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
