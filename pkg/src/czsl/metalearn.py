"""Backbone pretraining, bi-level episodic training, test-time adaptation."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .augment import MixupConfig, augment_query
from .compgraph import build_graph, gcn_weights, init_gcn, normalize_adjacency, propagate
from .dataset import Composition, Dataset, EmbeddingProvider, Split
from .encoder import (Backbone, backbone_apply, backbone_forward, episode_loss, gated_scores,
                      init_backbone, init_correlation, init_embed)
from .evaluator import EpisodeResult, aggregate
from .sampler import Episode, EpisodeConfig, sample_episode
from .seeding import child_rng, rng_from_state, rng_state

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    d_w: int = 32
    gcn_layers: tuple[int, ...] = (64, 64)
    corr_hidden: int = 64
    embed_hidden: int = 64
    backbone_channels: tuple[int, ...] = (32, 32, 32, 32)
    backbone_pools: tuple[bool, ...] = (True, True, False, False)

    @property
    def d(self) -> int:
        return self.gcn_layers[-1]

    @property
    def c_ch(self) -> int:
        return self.backbone_channels[-1]


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 0.4
    outer_lr: float = 1e-3
    inner_steps: int = 1
    max_episodes: int = 2000
    weight_decay: float = 5e-4
    second_order: bool = False
    bilevel: bool = True
    mixup: bool = True
    mixup_alpha: float = 1.0
    optimizer: str = "sgd"
    val_every: int = 500
    val_episodes: int = 50
    checkpoint_every: int = 500
    seed: int = 0
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("step sizes must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Model:
    theta: dc.ParamTree
    backbone: Backbone
    provider: EmbeddingProvider
    arch: ArchConfig = field(default_factory=ArchConfig)
    inner_lr: float = 0.4
    inner_steps: int = 1


def init_params(arch: ArchConfig, rng: np.random.Generator) -> dc.ParamTree:
    gcn = init_gcn(arch.d_w, arch.gcn_layers, rng)
    corr = init_correlation(arch.c_ch, arch.d, arch.corr_hidden, rng)
    emb = init_embed(arch.c_ch, arch.embed_hidden, arch.d, rng)
    return gcn.merge(corr).merge(emb)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

class Adam:
    """Adam with L2 penalty folded into the gradient."""

    name = "adam"

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dc.ParamTree | None = None
        self.v: dc.ParamTree | None = None
        self.t = 0

    def step(self, theta: dc.ParamTree, grad: dc.ParamTree) -> dc.ParamTree:
        if self.m is None:
            self.m, self.v = theta.zeros_like(), theta.zeros_like()
        self.t += 1
        self.m = self.m * self.b1 + grad * (1 - self.b1)
        self.v = self.v * self.b2 + grad.map(np.square) * (1 - self.b2)
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        upd = self.m.zip_map(self.v, lambda m, v: (m / c1) / (np.sqrt(v / c2) + self.eps))
        return theta - upd * self.lr

    def state(self) -> tuple[dc.ParamTree, dict]:
        if self.m is None:
            return dc.ParamTree(), {"t": 0}
        tree = dc.ParamTree([(f"m:{k}", v) for k, v in self.m.items()] + [(f"v:{k}", v) for k, v in self.v.items()])
        return tree, {"t": self.t}

    def load(self, tree: dc.ParamTree, meta: dict) -> None:
        self.t = meta["t"]
        if self.t:
            self.m = dc.ParamTree((k[2:], v) for k, v in tree.items() if k.startswith("m:"))
            self.v = dc.ParamTree((k[2:], v) for k, v in tree.items() if k.startswith("v:"))


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: dc.ParamTree, grad: dc.ParamTree) -> dc.ParamTree:
        return theta - grad * self.lr

    def state(self) -> tuple[dc.ParamTree, dict]:
        return dc.ParamTree(), {}

    def load(self, tree, meta) -> None:
        pass


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


def pretrain_backbone(dataset: Dataset, epochs: int, batch_size: int, lr: float,
                      rng: np.random.Generator, weight_decay: float = 5e-4,
                      arch: ArchConfig = ArchConfig(), split: Split | None = Split.TRAIN,
                      ) -> tuple[Backbone, list[float]]:
    """Train the conv stack plus a pooled softmax head on base compositions.

    Returns the frozen backbone (head discarded) and per-epoch train accuracy.
    """
    data = dataset if split is None else dataset.split_view(split)
    if len(data) == 0:
        raise ValueError("pretraining split is empty")
    classes = data.compositions
    cls_index = {c: i for i, c in enumerate(classes)}
    y = np.array([cls_index[c] for c in data.labels])
    bb = init_backbone(rng, arch.backbone_channels, arch.backbone_pools)
    c = arch.c_ch
    head = dc.ParamTree([("head.w", rng.normal(0.0, np.sqrt(1.0 / c), size=(c, len(classes)))),
                         ("head.b", np.zeros(len(classes)))])
    theta = bb.params.merge(head)
    opt = Adam(lr)
    onehot = np.eye(len(classes))

    def loss(P, x, t):
        feats = dc.global_avg_pool(backbone_apply(P, x, bb.pools))
        return dc.mean(dc.softmax_cross_entropy(feats @ P["head.w"] + P["head.b"], t))

    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        correct = 0
        for lo in range(0, len(order), batch_size):
            idx = np.sort(order[lo:lo + batch_size])
            x = data.images[idx]
            val, g = dc.value_and_grad(loss, theta, x, onehot[y[idx]])
            if not math.isfinite(val):
                raise NumericError(f"pretraining loss became {val} in epoch {epoch}")
            theta = opt.step(theta, g + theta * weight_decay)
        with dc.no_grad():
            P = theta.to_tensors()
            for lo in range(0, len(y), 512):
                feats = dc.global_avg_pool(backbone_apply(P, data.images[lo:lo + 512], bb.pools))
                logits = (feats @ P["head.w"] + P["head.b"]).data
                correct += int((logits.argmax(axis=1) == y[lo:lo + 512]).sum())
        history.append(correct / len(y))
        log.info("pretrain epoch %d: train accuracy %.3f", epoch, history[-1])
    params = dc.ParamTree((k, v) for k, v in theta.items() if k.startswith("bb."))
    return Backbone(params, bb.pools, pretrained=True,
                    meta={"epochs": epochs, "classes": len(classes), "train_accuracy": history}), history


# ---------------------------------------------------------------------------
# episode plumbing
# ---------------------------------------------------------------------------

class FeatureBank:
    """Pooled backbone features for every dataset sample, computed once.

    Features are standardized per channel with statistics of the TRAIN split
    (falling back to all samples), a fixed affine map that keeps the inner
    step size meaningful regardless of the backbone's activation scale.
    """

    def __init__(self, dataset: Dataset, backbone: Backbone, standardize: bool = True):
        self.dataset = dataset
        self.backbone = backbone
        self.mean, self.scale = 0.0, 1.0
        raw = self.pool(dataset.images)
        if standardize and len(raw):
            base = np.array([dataset.split_of(c) == Split.TRAIN for c in dataset.labels])
            ref = raw[base] if base.any() else raw
            sd = ref.std(axis=0)
            self.mean, self.scale = ref.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)
        self.pooled = (raw - self.mean) / self.scale

    def pool(self, images: np.ndarray) -> np.ndarray:
        raw = backbone_forward(images, self.backbone).mean(axis=(-2, -1))
        return (raw - self.mean) / self.scale

    def __call__(self, sample_ids) -> np.ndarray:
        return self.pooled[self.dataset.rows(sample_ids)]


@dataclass
class EpisodeBatch:
    episode: Episode
    n1: int
    n2: int
    a_hat: np.ndarray
    v0: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    query_ids: np.ndarray
    query_labels: list[Composition]


_ADJ_CACHE: dict[tuple[int, int], np.ndarray] = {}


def prepare_batch(model: Model, episode: Episode, dataset: Dataset, bank: FeatureBank) -> EpisodeBatch:
    g = build_graph([dataset.primitive(p) for p in episode.p1],
                    [dataset.primitive(p) for p in episode.p2], model.provider)
    key = (g.n1, g.n2)
    if key not in _ADJ_CACHE:
        _ADJ_CACHE[key] = normalize_adjacency(g.adjacency, g.degree)
    n_c = g.n1 * g.n2
    eye = np.eye(n_c)
    return EpisodeBatch(episode, g.n1, g.n2, _ADJ_CACHE[key], g.features,
                        bank(episode.support_ids()), eye[episode.support_targets()],
                        bank(episode.query_ids()), eye[episode.query_targets()],
                        episode.query_ids(), [c for _, c in episode.query])


def episode_scores(P, batch: EpisodeBatch, feats) -> dc.Tensor:
    V = propagate(batch.a_hat, batch.v0, gcn_weights(P))
    return gated_scores(feats, V, batch.n1, batch.n2, P)


def batch_loss(P, batch: EpisodeBatch, feats, targets) -> dc.Tensor:
    return episode_loss(episode_scores(P, batch, feats), targets)


def support_loss(P, batch: EpisodeBatch) -> dc.Tensor:
    return batch_loss(P, batch, batch.support_x, batch.support_y)


def _check(val: float, what: str) -> float:
    if not math.isfinite(val):
        raise NumericError(f"{what} became {val}")
    return val


def inner_adapt(theta: dc.ParamTree, batch: EpisodeBatch, model: Model | None = None,
                eps: float | None = None, steps: int | None = None,
                loss: Callable | None = None) -> dc.ParamTree:
    """``steps`` full-batch gradient steps of size ``eps`` on the support loss."""
    return _inner(theta, batch, model, eps, steps, loss)[0]


def _inner(theta, batch, model=None, eps=None, steps=None, loss=None):
    eps = model.inner_lr if eps is None else eps
    steps = (model.inner_steps if model is not None else 1) if steps is None else steps
    loss = support_loss if loss is None else loss
    first = None
    cur = theta
    for _ in range(steps):
        val, g = dc.value_and_grad(loss, cur, batch)
        first = _check(val, "support loss") if first is None else first
        cur = cur - g * eps
    return cur, first


def _mixed(batch: EpisodeBatch, dataset: Dataset, bank: FeatureBank, alpha: float, rng):
    imgs = dataset.images[dataset.rows(batch.query_ids)]
    mq = augment_query(imgs, batch.query_labels, batch.episode, MixupConfig(alpha), rng)
    return bank.pool(mq.images), mq.targets


def outer_gradient(theta: dc.ParamTree, batch: EpisodeBatch, dataset: Dataset, bank: FeatureBank,
                   cfg: TrainConfig, rng: np.random.Generator) -> tuple[dc.ParamTree, dict]:
    """Gradient of the outer objective (weight decay excluded) at ``theta``."""
    if cfg.mixup:
        qx, qy = _mixed(batch, dataset, bank, cfg.mixup_alpha, rng)
    else:
        qx, qy = batch.query_x, batch.query_y
    if not cfg.bilevel:
        x = np.concatenate([batch.support_x, qx])
        y = np.concatenate([batch.support_y, qy])
        val, g = dc.value_and_grad(batch_loss, theta, batch, x, y)
        return g, {"inner_loss": float("nan"), "outer_loss": _check(val, "joint loss")}
    if cfg.second_order:
        return _second_order(theta, batch, cfg, qx, qy)
    adapted, inner_val = _inner(theta, batch, eps=cfg.inner_lr, steps=cfg.inner_steps)
    val, g = dc.value_and_grad(batch_loss, adapted, batch, qx, qy)
    return g, {"inner_loss": inner_val, "outer_loss": _check(val, "outer loss")}


def _second_order(theta, batch, cfg, qx, qy):
    leaves = theta.to_tensors(requires_grad=True)
    names = list(leaves)
    cur = dict(leaves)
    inner_val = None
    for _ in range(cfg.inner_steps):
        L = support_loss(cur, batch)
        inner_val = L.item() if inner_val is None else inner_val
        gs = dc.grad(L, [cur[k] for k in names], create_graph=True)
        cur = {k: cur[k] - cfg.inner_lr * g for k, g in zip(names, gs)}
    Lq = batch_loss(cur, batch, qx, qy)
    gs = dc.grad(Lq, [leaves[k] for k in names])
    return (dc.ParamTree((k, g.data) for k, g in zip(names, gs)),
            {"inner_loss": _check(inner_val, "support loss"), "outer_loss": _check(Lq.item(), "outer loss")})


def outer_step(theta: dc.ParamTree, batch: EpisodeBatch, dataset: Dataset, bank: FeatureBank,
               cfg: TrainConfig, rng: np.random.Generator, optimizer=None) -> tuple[dc.ParamTree, dict]:
    """One meta-update; weight decay enters the outer loss as ``wd/2 * |theta|^2``."""
    g, info = outer_gradient(theta, batch, dataset, bank, cfg, rng)
    if cfg.weight_decay:
        g = g + theta * cfg.weight_decay
    optimizer = optimizer or make_optimizer(cfg.optimizer, cfg.outer_lr)
    return optimizer.step(theta, g), info


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer_scores(model: Model, episode: Episode, dataset: Dataset, bank: FeatureBank,
                 batch: EpisodeBatch | None = None) -> np.ndarray:
    batch = batch or prepare_batch(model, episode, dataset, bank)
    adapted = inner_adapt(model.theta, batch, model)
    return dc.evaluate(episode_scores, adapted, batch, batch.query_x)


def infer_episode(model: Model, episode: Episode, dataset: Dataset, bank: FeatureBank) -> list[Composition]:
    """Adapt on the support set once, then argmax over every pair of the grid.

    Ties go to the lowest pair index; ``model.theta`` is left untouched.
    """
    scores = infer_scores(model, episode, dataset, bank)
    grid = episode.grid
    return [grid[i] for i in np.argmax(scores, axis=1)]


def evaluate_model(model: Model, episodes: list[Episode], dataset: Dataset, bank: FeatureBank) -> list[EpisodeResult]:
    return [EpisodeResult.from_episode(e, infer_episode(model, e, dataset, bank)) for e in episodes]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LogEntry:
    episode: int
    inner_loss: float
    outer_loss: float
    val_hm: float = float("nan")

    def line(self) -> str:
        return f"{self.episode}\t{self.inner_loss!r}\t{self.outer_loss!r}\t{self.val_hm!r}"


LOG_HEADER = "episode\tinner_loss\touter_loss\tval_hm"


@dataclass
class TrainResult:
    model: Model
    log: list[LogEntry]
    final_theta: dc.ParamTree
    best_hm: float
    best_episode: int


def _save_state(ckdir: Path, theta, best, opt, state: dict) -> None:
    ckdir.mkdir(parents=True, exist_ok=True)
    opt_tree, opt_meta = opt.state()
    state = dict(state, optimizer=opt_meta)
    for name, tree in (("theta.params", theta), ("best.params", best), ("optimizer.params", opt_tree)):
        tmp = ckdir / (name + ".tmp")
        tree.save(tmp)
        os.replace(tmp, ckdir / name)
    tmp = ckdir / "state.json.tmp"
    tmp.write_text(json.dumps(state, sort_keys=True))
    os.replace(tmp, ckdir / "state.json")


def train(dataset: Dataset, model: Model, cfg: TrainConfig, bank: FeatureBank | None = None, *,
          checkpoint_dir=None, resume: bool = False, log_path=None,
          on_episode: Callable[[LogEntry], None] | None = None) -> TrainResult:
    """Episodic training on the TRAIN split with HM-based checkpoint selection on VAL."""
    bank = bank or FeatureBank(dataset, model.backbone)
    theta = model.theta
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr)
    r_train = child_rng(cfg.seed, "sampler.train")
    r_mix = child_rng(cfg.seed, "mixup")
    has_val = cfg.val_every > 0 and cfg.val_episodes >= 2 and bool(dataset.compositions_in(Split.VAL))
    val_eps: list[Episode] = []
    if has_val and cfg.max_episodes > 0:
        r_val = child_rng(cfg.seed, "sampler.val")
        val_eps = [sample_episode(dataset, Split.VAL, cfg.episode, r_val) for _ in range(cfg.val_episodes)]
    history: list[LogEntry] = []
    best, best_hm, best_ep = theta, -1.0, -1
    start = 0
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if resume and ckdir and (ckdir / "state.json").exists():
        st = json.loads((ckdir / "state.json").read_text())
        theta = dc.ParamTree.load(ckdir / "theta.params")
        best = dc.ParamTree.load(ckdir / "best.params")
        opt.load(dc.ParamTree.load(ckdir / "optimizer.params"), st["optimizer"])
        r_train, r_mix = rng_from_state(st["rng_train"]), rng_from_state(st["rng_mix"])
        best_hm, best_ep, start = st["best_hm"], st["best_episode"], st["next_episode"]
        history = [LogEntry(**row) for row in st["log"]]
        log.info("resumed training at episode %d", start)

    def validate(th) -> float:
        m = replace(model, theta=th, inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps)
        return aggregate(evaluate_model(m, val_eps, dataset, bank)).hm

    for ep in range(start, cfg.max_episodes):
        episode = sample_episode(dataset, Split.TRAIN, cfg.episode, r_train)
        batch = prepare_batch(model, episode, dataset, bank)
        theta, info = outer_step(theta, batch, dataset, bank, cfg, r_mix, opt)
        entry = LogEntry(ep, info["inner_loss"], info["outer_loss"])
        last = ep == cfg.max_episodes - 1
        if val_eps and ((ep + 1) % cfg.val_every == 0 or last):
            entry.val_hm = validate(theta)
            if entry.val_hm > best_hm:
                best, best_hm, best_ep = theta, entry.val_hm, ep
            log.info("episode %d: outer loss %.4f, val HM %.2f (best %.2f @ %d)",
                     ep, entry.outer_loss, entry.val_hm, best_hm, best_ep)
        history.append(entry)
        if on_episode:
            on_episode(entry)
        if ckdir and ((ep + 1) % cfg.checkpoint_every == 0 or last):
            _save_state(ckdir, theta, best, opt, {
                "next_episode": ep + 1, "best_hm": best_hm, "best_episode": best_ep,
                "rng_train": rng_state(r_train), "rng_mix": rng_state(r_mix),
                "log": [asdict(e) for e in history]})
    if not val_eps:
        best = theta
    if log_path:
        Path(log_path).write_text("\n".join([LOG_HEADER] + [e.line() for e in history]) + "\n")
    out = replace(model, theta=best, inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps)
    return TrainResult(out, history, theta, best_hm, best_ep)


def new_model(dataset: Dataset, backbone: Backbone, arch: ArchConfig, seed: int,
              inner_lr: float = 0.4, inner_steps: int = 1, embed_seed: int = 0) -> Model:
    provider = EmbeddingProvider.for_dataset(dataset, arch.d_w, embed_seed)
    theta = init_params(arch, child_rng(seed, "init"))
    return Model(theta, backbone, provider, arch, inner_lr, inner_steps)
