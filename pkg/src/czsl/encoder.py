"""Visual pathway: frozen conv backbone, correlation-map gating, scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


class UnpretrainedBackboneError(RuntimeError):
    pass


class InvalidDistributionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

@dataclass
class Backbone:
    """Conv-4 style stack: each block is 3x3 conv, ReLU, optional 2x2 max-pool."""

    params: dc.ParamTree
    pools: tuple[bool, ...] = (True, True, False, False)
    pretrained: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def out_channels(self) -> int:
        return self.params[f"bb.conv{len(self.pools) - 1}.w"].shape[0]


def init_backbone(rng: np.random.Generator, channels: tuple[int, ...] = (32, 32, 32, 32),
                  pools: tuple[bool, ...] = (True, True, False, False), in_ch: int = 3) -> Backbone:
    if len(channels) != len(pools):
        raise ValueError("channels and pools must have equal length")
    leaves = []
    c_in = in_ch
    for i, c_out in enumerate(channels):
        std = np.sqrt(2.0 / (c_in * 9))
        leaves.append((f"bb.conv{i}.w", rng.normal(0.0, std, size=(c_out, c_in, 3, 3))))
        leaves.append((f"bb.conv{i}.b", np.zeros(c_out)))
        c_in = c_out
    return Backbone(dc.ParamTree(leaves), tuple(pools))


def backbone_apply(params, x, pools) -> dc.Tensor:
    """Differentiable forward on a batch ``[B, 3, H, W]``; used for pretraining."""
    h = dc.as_tensor(x)
    for i, pool in enumerate(pools):
        h = dc.relu(dc.conv2d(h, params[f"bb.conv{i}.w"], params[f"bb.conv{i}.b"], pad=1))
        if pool:
            h = dc.maxpool2x2(h)
    return h


def backbone_forward(images: np.ndarray, backbone: Backbone, batch_size: int = 256) -> np.ndarray:
    """Feature maps ``[B, c, h, w]`` (or ``[c, h, w]`` for one image)."""
    if not backbone.pretrained:
        raise UnpretrainedBackboneError("backbone must be pretrained and frozen before use")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    outs = []
    with dc.no_grad():
        params = backbone.params.to_tensors()
        for lo in range(0, len(images), batch_size):
            outs.append(backbone_apply(params, images[lo:lo + batch_size], backbone.pools).data)
    feats = np.concatenate(outs) if outs else np.zeros((0,))
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# correlation map and embedding function
# ---------------------------------------------------------------------------

def _dense(rng, d_in, d_out):
    return rng.normal(0.0, np.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out)), np.zeros(d_out)


def init_correlation(c_ch: int, d: int, hidden: int, rng: np.random.Generator) -> dc.ParamTree:
    """Two unshared branches, one per primitive kind: [c + d] -> hidden -> c."""
    leaves = []
    for branch in ("corr1", "corr2"):
        w0, b0 = _dense(rng, c_ch + d, hidden)
        w1, b1 = _dense(rng, hidden, c_ch)
        leaves += [(f"{branch}.w0", w0), (f"{branch}.b0", b0), (f"{branch}.w1", w1), (f"{branch}.b1", b1)]
    return dc.ParamTree(leaves)


def init_embed(c_ch: int, hidden: int, d: int, rng: np.random.Generator) -> dc.ParamTree:
    w0, b0 = _dense(rng, c_ch, hidden)
    w1, b1 = _dense(rng, hidden, d)
    return dc.ParamTree([("emb.w0", w0), ("emb.b0", b0), ("emb.w1", w1), ("emb.b1", b1)])


def mlp2(x, params, prefix: str) -> dc.Tensor:
    h = dc.relu(dc.as_tensor(x) @ params[f"{prefix}.w0"] + params[f"{prefix}.b0"])
    return h @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]


def correlation_logits(pooled, v_prims, params, prefix: str) -> dc.Tensor:
    """Branch output for every (sample, primitive): ``[B, n, c]``.

    ``pooled`` is GAP(F) ``[B, c]``; ``v_prims`` is ``[n, d]``.
    """
    pooled, v_prims = dc.as_tensor(pooled), dc.as_tensor(v_prims)
    w0 = dc.as_tensor(params[f"{prefix}.w0"])
    if pooled.shape[-1] + v_prims.shape[-1] != w0.shape[0]:
        raise dc.ShapeError(f"{prefix}: input width {pooled.shape[-1]} + {v_prims.shape[-1]} "
                            f"does not match weight rows {w0.shape[0]}")
    B, c = pooled.shape
    n, d = v_prims.shape
    x = dc.concat([dc.broadcast_to(dc.reshape(pooled, (B, 1, c)), (B, n, c)),
                   dc.broadcast_to(dc.reshape(v_prims, (1, n, d)), (B, n, d))], axis=-1)
    return mlp2(x, params, prefix)


def correlation_map(F: np.ndarray, v_p1: np.ndarray, v_p2: np.ndarray, params) -> np.ndarray:
    """Channel gate in (0, 1)^c for one feature map ``[c, h, w]`` and one pair."""
    with dc.no_grad():
        g = dc.global_avg_pool(dc.Tensor(np.asarray(F)[None]))
        l1 = correlation_logits(g, np.asarray(v_p1)[None], params, "corr1")
        l2 = correlation_logits(g, np.asarray(v_p2)[None], params, "corr2")
        return dc.sigmoid(l1 + l2).data[0, 0].copy()


def gated_scores(pooled, V, n1: int, n2: int, params) -> dc.Tensor:
    """Compatibility scores ``[B, n1 * n2]`` in the graph's pair order.

    ``pooled`` is GAP(F) per sample, ``V`` the GCN output rows (primitives
    first, then pairs row-major).
    """
    pooled, V = dc.as_tensor(pooled), dc.as_tensor(V)
    B, c = pooled.shape
    if V.shape[0] != n1 + n2 + n1 * n2:
        raise dc.ShapeError(f"score: expected {n1 + n2 + n1 * n2} graph rows, got {V.shape[0]}")
    vp1, vp2, vc = V[:n1], V[n1:n1 + n2], V[n1 + n2:]
    l1 = correlation_logits(pooled, vp1, params, "corr1")
    l2 = correlation_logits(pooled, vp2, params, "corr2")
    gate = dc.sigmoid(dc.reshape(l1, (B, n1, 1, c)) + dc.reshape(l2, (B, 1, n2, c)))
    gate = dc.reshape(gate, (B, n1 * n2, c))
    # the gate is constant over space, so GAP(gate * F) == gate * GAP(F)
    e = mlp2(gate * dc.reshape(pooled, (B, 1, c)), params, "emb")
    if e.shape[-1] != vc.shape[-1]:
        raise dc.ShapeError(f"score: embedding width {e.shape[-1]} vs graph width {vc.shape[-1]}")
    return dc.tsum(e * dc.reshape(vc, (1,) + vc.shape), axis=-1)


def score_all(image: np.ndarray, V: np.ndarray, n1: int, n2: int, params, backbone: Backbone) -> np.ndarray:
    """Scores of one image against all ``n1 * n2`` pairs of an episode graph."""
    F = backbone_forward(image, backbone)
    with dc.no_grad():
        pooled = dc.global_avg_pool(dc.Tensor(F[None]))
        return gated_scores(pooled, V, n1, n2, params).data[0].copy()


def check_distribution(target: np.ndarray, tol: float = 1e-9) -> None:
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0) or not np.all(np.isfinite(t)) or np.any(np.abs(t.sum(axis=-1) - 1.0) > tol):
        raise InvalidDistributionError("target must be non-negative and sum to 1 along the last axis")


def episode_loss(scores, target) -> dc.Tensor:
    """Soft-label cross-entropy; averaged over rows for a batch ``[B, C]``."""
    target = np.asarray(target, dtype=np.float64)
    check_distribution(target)
    scores = dc.as_tensor(scores)
    if scores.shape != target.shape:
        raise dc.ShapeError(f"episode_loss: scores {scores.shape} vs target {target.shape}")
    ce = dc.softmax_cross_entropy(scores, target)
    return dc.mean(ce) if ce.ndim else ce
