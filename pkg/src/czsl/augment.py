"""Compositional Mixup over episode query sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Composition
from .sampler import Episode


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


@dataclass(frozen=True)
class MixedQuery:
    images: np.ndarray      # [n, 3, H, W]
    targets: np.ndarray     # [n, n1 * n2] soft labels
    partners: np.ndarray    # index j mixed into item i
    lambdas: np.ndarray


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(cfg.alpha, cfg.alpha))


def mix_images(x_i: np.ndarray, x_j: np.ndarray, lam: float) -> np.ndarray:
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"mix_images: shapes {x_i.shape} and {x_j.shape} differ")
    return lam * x_i + (1.0 - lam) * x_j


def mix_labels(c_i: Composition, c_j: Composition, lam: float, episode: Episode) -> np.ndarray:
    """Soft label over the episode grid.

    Mass lam^2 on c_i, lam(1-lam) on each cross pair (p1 of i, p2 of j) and
    (p1 of j, p2 of i), (1-lam)^2 on c_j. Coinciding pairs accumulate.
    """
    out = np.zeros(len(episode.p1) * len(episode.p2))
    mu = 1.0 - lam
    for c, w in ((c_i, lam * lam), (Composition(c_i.p1, c_j.p2), lam * mu),
                 (Composition(c_j.p1, c_i.p2), lam * mu), (c_j, mu * mu)):
        out[episode.comp_index(c)] += w
    return out


def augment_query(images: np.ndarray, labels: list[Composition], episode: Episode,
                  cfg: MixupConfig, rng: np.random.Generator) -> MixedQuery:
    """One mixed sample per query item, each with a uniformly drawn partner j != i."""
    n = len(labels)
    if n < 2:
        raise ValueError("augment_query needs at least two query samples")
    images = np.asarray(images, dtype=np.float64)
    partners = np.empty(n, dtype=np.int64)
    lambdas = np.empty(n)
    for i in range(n):
        k = int(rng.integers(n - 1))
        partners[i] = k if k < i else k + 1
        lambdas[i] = sample_lambda(cfg, rng)
    lam = lambdas.reshape((n,) + (1,) * (images.ndim - 1))
    mixed = lam * images + (1.0 - lam) * images[partners]
    targets = np.stack([mix_labels(labels[i], labels[partners[i]], lambdas[i], episode) for i in range(n)])
    return MixedQuery(mixed, targets, partners, lambdas)
