"""Hierarchical seeding: one root seed, an independent stream per subsystem."""
from __future__ import annotations

import zlib

import numpy as np


def child_seed(root: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])


def child_rng(root: int, name: str) -> np.random.Generator:
    """Generator for subsystem ``name`` (e.g. ``"sampler.train"``, ``"mixup"``)."""
    return np.random.default_rng(child_seed(root, name))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
