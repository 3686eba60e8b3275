"""Per-episode baselines: Visual Product and Label Embedding.

Both fit small heads on pooled backbone features of the support set only
(no meta-training) and predict over the full episode pair grid.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc
from .dataset import Composition, Dataset, EmbeddingProvider
from .encoder import Backbone, backbone_forward, mlp2
from .sampler import Episode

ITERS, LR, BATCH, L2 = 100, 1e-2, 4, 1e-3


def _support_features(episode: Episode, dataset: Dataset, backbone: Backbone, features=None) -> np.ndarray:
    ids = episode.support_ids()
    if features is not None:
        return features(ids)
    return backbone_forward(dataset.images[dataset.rows(ids)], backbone).mean(axis=(-2, -1))


def _query_features(episode: Episode, dataset: Dataset, backbone: Backbone, features=None) -> np.ndarray:
    ids = episode.query_ids()
    if features is not None:
        return features(ids)
    return backbone_forward(dataset.images[dataset.rows(ids)], backbone).mean(axis=(-2, -1))


def _fit(loss: Callable, params: dc.ParamTree, n: int, iters: int, batch: int, lr: float, l2: float,
         rng: np.random.Generator) -> dc.ParamTree:
    """Minibatch SGD; batches are drawn without replacement within each pass."""
    order = np.empty(0, dtype=np.int64)
    for _ in range(iters):
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:batch], order[batch:]
        _, g = dc.value_and_grad(loss, params, idx)
        params = params - (g + params * l2) * lr
    return params


def _linear(rng, d_in, d_out, prefix):
    return [(f"{prefix}.w", rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))),
            (f"{prefix}.b", np.zeros(d_out))]


def visprod_probs(params, feats, episode: Episode) -> np.ndarray:
    """Composition probabilities ``[B, n1 * n2]`` as the outer product of two heads."""
    with dc.no_grad():
        x = dc.Tensor(np.asarray(feats))
        p1 = dc.softmax(x @ params["vp.t1.w"] + params["vp.t1.b"]).data
        p2 = dc.softmax(x @ params["vp.t2.w"] + params["vp.t2.b"]).data
    return (p1[:, :, None] * p2[:, None, :]).reshape(len(p1), -1)


def visprod_fit(episode: Episode, feats: np.ndarray, iters: int, lr: float, batch: int,
                rng: np.random.Generator, l2: float = L2) -> dc.ParamTree:
    n1, n2 = len(episode.p1), len(episode.p2)
    i1 = {p: i for i, p in enumerate(episode.p1)}
    i2 = {p: i for i, p in enumerate(episode.p2)}
    y1 = np.eye(n1)[[i1[c.p1] for _, c in episode.support]]
    y2 = np.eye(n2)[[i2[c.p2] for _, c in episode.support]]
    c = feats.shape[1]
    params = dc.ParamTree(_linear(rng, c, n1, "vp.t1") + _linear(rng, c, n2, "vp.t2"))

    def loss(P, idx):
        x = dc.Tensor(feats[idx])
        l1 = dc.softmax_cross_entropy(x @ P["vp.t1.w"] + P["vp.t1.b"], y1[idx])
        l2_ = dc.softmax_cross_entropy(x @ P["vp.t2.w"] + P["vp.t2.b"], y2[idx])
        return dc.mean(l1 + l2_)

    return _fit(loss, params, len(feats), iters, batch, lr, l2, rng)


def visprod_fit_infer(episode: Episode, backbone: Backbone, iters: int = ITERS, lr: float = LR,
                      batch: int = BATCH, rng: np.random.Generator | None = None, *,
                      dataset: Dataset, features=None) -> list[Composition]:
    rng = rng if rng is not None else np.random.default_rng(0)
    params = visprod_fit(episode, _support_features(episode, dataset, backbone, features), iters, lr, batch, rng)
    probs = visprod_probs(params, _query_features(episode, dataset, backbone, features), episode)
    grid = episode.grid
    return [grid[i] for i in np.argmax(probs, axis=1)]


def _pair_embeddings(episode: Episode, dataset: Dataset, provider: EmbeddingProvider) -> np.ndarray:
    return np.stack([(provider(dataset.primitive(c.p1)) + provider(dataset.primitive(c.p2))) / 2.0
                     for c in episode.grid])


def le_scores(params, feats, pair_emb) -> dc.Tensor:
    """Image MLP output dotted with linearly mapped pair embeddings."""
    img = mlp2(feats, params, "le.img")
    comp = dc.as_tensor(pair_emb) @ params["le.txt.w"]
    return img @ comp.T


def le_fit_infer(episode: Episode, backbone: Backbone, provider: EmbeddingProvider, iters: int = ITERS,
                 lr: float = LR, batch: int = BATCH, rng: np.random.Generator | None = None, *,
                 dataset: Dataset, features=None, hidden: int = 64, d: int = 32) -> list[Composition]:
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = _support_features(episode, dataset, backbone, features)
    emb = _pair_embeddings(episode, dataset, provider)
    c, d_w = feats.shape[1], emb.shape[1]
    params = dc.ParamTree([
        ("le.img.w0", rng.normal(0.0, np.sqrt(2.0 / c), size=(c, hidden))), ("le.img.b0", np.zeros(hidden)),
        ("le.img.w1", rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, d))), ("le.img.b1", np.zeros(d)),
        ("le.txt.w", rng.normal(0.0, np.sqrt(1.0 / d_w), size=(d_w, d))),
    ])
    y = np.eye(len(episode.grid))[episode.support_targets()]

    def loss(P, idx):
        return dc.mean(dc.softmax_cross_entropy(le_scores(P, feats[idx], emb), y[idx]))

    params = _fit(loss, params, len(feats), iters, batch, lr, L2, rng)
    scores = dc.evaluate(le_scores, params, _query_features(episode, dataset, backbone, features), emb)
    grid = episode.grid
    return [grid[i] for i in np.argmax(scores, axis=1)]
