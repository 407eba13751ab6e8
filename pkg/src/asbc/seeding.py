"""Named random streams derived from one root seed.

Every consumer asks for ``stream(root, "stage-name", index)``; streams for
different (stage, index) pairs are statistically independent and do not
depend on the order in which they are requested.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _seed_sequence(root: int, stage: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(stage.encode()), int(index)))


def stream(root: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(_seed_sequence(root, stage, index))


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    return int(_seed_sequence(root, stage, index).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(root: int, stage: str, index: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, stage, index))
    return g
