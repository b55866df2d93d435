"""Substream derivation: all run randomness flows from one manifest seed.

Each consumer gets an independent generator keyed by a stable (domain,
index) pair, so per-generation noise draws stay reproducible regardless of
how other components consume randomness.
"""

from __future__ import annotations

import numpy as np

DOMAIN_MOCK_BACKEND = 0
DOMAIN_PRIVATIZE = 1
DOMAIN_SELECT = 2
DOMAIN_PRIVATE_DATA = 3
DOMAIN_SUBSAMPLE = 4


def substream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Generator for one (domain, index) slot of the run's seed tree."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(domain, index)))
