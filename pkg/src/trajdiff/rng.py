"""Named random substreams derived from a single root seed.

Every stochastic component (data synthesis, masking, training noise,
sampling) pulls its randomness from a substream identified by a string
name, so one ``--rng-seed`` reproduces a whole run.
"""

from __future__ import annotations

import hashlib

import jax
import numpy as np


def _stream_entropy(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """NumPy generator for the substream ``name`` of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(_stream_entropy(seed, name)))


def jax_key(seed: int, name: str) -> jax.Array:
    """JAX PRNG key for the substream ``name`` of ``seed``."""
    return jax.random.PRNGKey(_stream_entropy(seed, name) % (2**63))
