"""Deterministic RNG derivation.

Every random decision in a run is drawn from a generator derived from
(master seed, purpose label). Labels are hashed with blake2s so streams
for different purposes are statistically independent, and the same
(seed, label) pair always reproduces the same stream. This is what makes
resume-from-checkpoint bitwise equivalent to an uninterrupted run: each
(stage, epoch) gets its own substream, so no stream position needs to
survive a restart.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.blake2s(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Return a fresh Generator for this (seed, label) pair."""
    return np.random.default_rng([seed, _label_key(label)])


def seed_for(seed: int, label: str) -> int:
    """Derive a child integer seed, for APIs that take a seed not a Generator."""
    digest = hashlib.blake2s(
        f"{seed}:{label}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")
