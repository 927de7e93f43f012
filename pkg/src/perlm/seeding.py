"""Deterministic derivation of subsystem RNGs from one root seed.

Every random draw in the package flows from a root seed through
``derive_rng(root, label, *indices)``: the label is hashed with CRC-32 and
combined with the indices into a ``numpy.random.SeedSequence``. The same
(root, label, indices) always yields the same generator, independent of
call order, which is what makes checkpoint resume and parallel instance
generation bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed_sequence(root: int, label: str, *indices: int) -> np.random.SeedSequence:
    entropy = [int(root) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))]
    entropy.extend(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices)
    return np.random.SeedSequence(entropy)


def derive_rng(root: int, label: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root, label, *indices))
