"""Named sub-seeds derived from one master seed.

Every random stream in the package is keyed by ``(master, name, *index)`` so
that e.g. the split of trial 3 never depends on how many draws the
initialiser of trial 2 made.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, name: str, *index: int) -> int:
    key = ":".join([str(int(master)), name, *(str(int(i)) for i in index)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(master: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name, *index))
