"""Per-episode compositional graph and GCN propagation.

Node order: the ``n1`` TYPE1 primitives, then the ``n2`` TYPE2 primitives,
then every pair ``(i, j)`` at index ``n1 + n2 + i * n2 + j``. Pairs are all
potential compositions, whether or not the dataset contains them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataset import EmbeddingProvider, Primitive, embedding_for

DEFAULT_LAYERS = (64, 64)


@dataclass(frozen=True)
class CompGraph:
    n1: int
    n2: int
    adjacency: np.ndarray
    degree: np.ndarray
    features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def comp_offset(self) -> int:
        return self.n1 + self.n2

    def comp_node(self, i: int, j: int) -> int:
        return self.n1 + self.n2 + i * self.n2 + j


def graph_structure(n1: int, n2: int) -> np.ndarray:
    """Binary symmetric adjacency with self-loops for ``n1 x n2`` pairs.

    Each pair and its two primitives form a triangle, so a composition node
    has exactly two neighbours and every TYPE1 node touches every TYPE2 node.
    """
    H = n1 + n2 + n1 * n2
    A = np.eye(H)
    for i in range(n1):
        for j in range(n2):
            c = n1 + n2 + i * n2 + j
            for a, b in ((c, i), (c, n1 + j), (i, n1 + j)):
                A[a, b] = A[b, a] = 1.0
    return A


def build_graph(p1: list[Primitive], p2: list[Primitive], provider: EmbeddingProvider) -> CompGraph:
    if not p1 or not p2:
        raise ValueError("both primitive sets must be non-empty")
    n1, n2 = len(p1), len(p2)
    A = graph_structure(n1, n2)
    e1 = np.array([embedding_for(p, provider) for p in p1])
    e2 = np.array([embedding_for(p, provider) for p in p2])
    comps = (e1[:, None, :] + e2[None, :, :]) / 2.0
    V0 = np.concatenate([e1, e2, comps.reshape(n1 * n2, -1)])
    for arr in (A, V0):
        arr.flags.writeable = False
    return CompGraph(n1, n2, A, A.sum(axis=1), V0)


def normalize_adjacency(A: np.ndarray, D: np.ndarray) -> np.ndarray:
    """``D^-1/2 A D^-1/2``; ``D`` may be the diagonal matrix or its diagonal."""
    d = np.diag(D) if np.ndim(D) == 2 else np.asarray(D, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("degrees must be positive")
    s = 1.0 / np.sqrt(d)
    return A * s[:, None] * s[None, :]


def init_gcn(d_in: int, layers: tuple[int, ...], rng: np.random.Generator, prefix: str = "gcn") -> dc.ParamTree:
    leaves = []
    for i, d_out in enumerate(layers):
        leaves.append((f"{prefix}.w{i}", rng.normal(0.0, np.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))))
        d_in = d_out
    return dc.ParamTree(leaves)


def gcn_weights(params, prefix: str = "gcn") -> list:
    i = 0
    out = []
    while f"{prefix}.w{i}" in params:
        out.append(params[f"{prefix}.w{i}"])
        i += 1
    return out


def propagate(a_hat, v0, weights, activate_last: bool = False) -> dc.Tensor:
    """Differentiable GCN stack: ReLU between layers.

    The last layer stays linear unless ``activate_last`` so embeddings keep
    their sign freedom.
    """
    v = dc.as_tensor(v0)
    a = dc.as_tensor(a_hat)
    for i, w in enumerate(weights):
        w = dc.as_tensor(w)
        if v.shape[-1] != w.shape[0]:
            raise dc.ShapeError(f"gcn layer {i}: features have width {v.shape[-1]}, weight expects {w.shape[0]}")
        v = a @ (v @ w)
        if i < len(weights) - 1 or activate_last:
            v = dc.relu(v)
    return v


def gcn_forward(g: CompGraph, params: dc.ParamTree, prefix: str = "gcn",
                activate_last: bool = False) -> np.ndarray:
    a_hat = normalize_adjacency(g.adjacency, g.degree)
    with dc.no_grad():
        return propagate(a_hat, g.features, gcn_weights(params, prefix), activate_last).data.copy()
