"""Seed derivation.

Every consumer of randomness asks for its own generator, keyed by the run
seed plus a tuple of labels. Generators are Philox (counter-based), so
streams for different labels never overlap and do not depend on call order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_words(labels) -> list[int]:
    words = []
    for label in labels:
        if isinstance(label, (int, np.integer)):
            value = int(label)
            if value < 0:
                raise ValueError(f"negative label {value}")
            words.extend([value & 0xFFFFFFFF, value >> 32])
        else:
            words.append(zlib.crc32(str(label).encode("utf-8")))
    return words


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, *_label_words(labels)])


def derive(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the stream named by ``labels`` under ``seed``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *labels)))


def derive_seed(seed: int, *labels) -> int:
    """A derived 63-bit integer seed, for records that must store a seed."""
    return int(seed_sequence(seed, *labels).generate_state(1, np.uint64)[0] >> np.uint64(1))
