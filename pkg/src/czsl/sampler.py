"""Open-world episode sampling with per-episode seen/unseen partitions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Composition, Dataset, Kind, Split


class SamplerExhaustedError(RuntimeError):
    """The split cannot produce a valid episode for the configuration."""


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    n_primitives: int = 5
    k_support: int = 5
    k_query: int = 5
    max_attempts: int = 10_000

    def __post_init__(self):
        for name in ("n_primitives", "k_support", "k_query", "max_attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Episode:
    p1: tuple[int, ...]
    p2: tuple[int, ...]
    seen: tuple[Composition, ...]
    unseen: tuple[Composition, ...]
    support: tuple[tuple[int, Composition], ...]
    query: tuple[tuple[int, Composition], ...]
    candidates: tuple[Composition, ...] = ()

    @property
    def grid(self) -> list[Composition]:
        """All ``|p1| * |p2|`` pairs, row-major over (p1 index, p2 index)."""
        return [Composition(a, b) for a in self.p1 for b in self.p2]

    def comp_index(self, c: Composition) -> int:
        try:
            return self.p1.index(c.p1) * len(self.p2) + self.p2.index(c.p2)
        except ValueError:
            raise EpisodeError(f"composition {c} is outside the episode grid") from None

    def support_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.support], dtype=np.int64)

    def query_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.query], dtype=np.int64)

    def support_targets(self) -> np.ndarray:
        return np.array([self.comp_index(c) for _, c in self.support], dtype=np.int64)

    def query_targets(self) -> np.ndarray:
        return np.array([self.comp_index(c) for _, c in self.query], dtype=np.int64)


def _check_split(dataset: Dataset, comps: list[Composition], cfg: EpisodeConfig) -> None:
    if not comps:
        raise SamplerExhaustedError("split has no compositions")
    need = cfg.k_support + cfg.k_query
    short = [c for c in comps if len(dataset.by_composition[c]) < need]
    if short:
        raise SamplerExhaustedError(
            f"{len(short)} composition(s) have fewer than K_s + K_q = {need} samples, "
            f"e.g. {dataset.comp_name(short[0])}")
    if len({c.p1 for c in comps}) < cfg.n_primitives or len({c.p2 for c in comps}) < cfg.n_primitives:
        raise SamplerExhaustedError(f"split has fewer than N^p = {cfg.n_primitives} primitives of a kind")


def sample_episode(dataset: Dataset, split: Split | None, cfg: EpisodeConfig,
                   rng: np.random.Generator) -> Episode:
    comps = dataset.compositions if split is None else dataset.compositions_in(split)
    _check_split(dataset, comps, cfg)
    comp_set = set(comps)
    n = cfg.n_primitives
    for _ in range(cfg.max_attempts):
        # step 1: seed compositions with pairwise distinct primitives
        p1: list[int] = []
        p2: list[int] = []
        seen: list[Composition] = []
        draws = 0
        while len(seen) < n and draws < 50 * n + 100:
            c = comps[rng.integers(len(comps))]
            draws += 1
            if c.p1 not in p1 and c.p2 not in p2:
                seen.append(c)
                p1.append(c.p1)
                p2.append(c.p2)
        if len(seen) < n:
            continue
        # step 2: candidate pairs that exist and are not seeds
        seeds = set(seen)
        cands = [Composition(a, b) for a in p1 for b in p2
                 if Composition(a, b) in comp_set and Composition(a, b) not in seeds]
        if len(cands) < 2:
            continue
        n_q = n + len(cands)
        lo, hi = n + 1, n_q - 1
        first_seen = bool(rng.integers(2))
        forced_seen, forced_unseen = (cands[0], cands[1]) if first_seen else (cands[1], cands[0])
        rest = cands[2:]
        coins = None
        for _ in range(cfg.max_attempts):
            coins = rng.integers(2, size=len(rest)).astype(bool)
            n_s = n + 1 + int(coins.sum())
            if lo <= n_s <= hi:
                break
        else:
            continue
        seen_all = seen + [forced_seen] + [c for c, k in zip(rest, coins) if k]
        unseen = [forced_unseen] + [c for c, k in zip(rest, coins) if not k]
        # steps 2-3: disjoint support/query draws
        support, query = [], []
        for c in seen_all:
            pick = rng.choice(dataset.by_composition[c], size=cfg.k_support + cfg.k_query, replace=False)
            support += [(int(s), c) for s in pick[:cfg.k_support]]
            query += [(int(s), c) for s in pick[cfg.k_support:]]
        for c in unseen:
            pick = rng.choice(dataset.by_composition[c], size=cfg.k_query, replace=False)
            query += [(int(s), c) for s in pick]
        return Episode(tuple(p1), tuple(p2), tuple(seen_all), tuple(unseen),
                       tuple(support), tuple(query), tuple(cands))
    raise SamplerExhaustedError(
        f"no valid episode after {cfg.max_attempts} attempts (N^p = {n}); the split cannot support this configuration")


def validate_episode(e: Episode, dataset: Dataset, cfg: EpisodeConfig | None = None) -> list[str]:
    """Names of violated episode invariants; empty when the episode is sound."""
    out: list[str] = []
    n = cfg.n_primitives if cfg else len(e.p1)
    if len(e.p1) != n or len(e.p2) != n:
        out.append("primitive set size")
    if len(set(e.p1)) != len(e.p1) or len(set(e.p2)) != len(e.p2):
        out.append("duplicate primitive")
    try:
        kinds_ok = (all(dataset.primitive(p).kind == Kind.TYPE1 for p in e.p1)
                    and all(dataset.primitive(p).kind == Kind.TYPE2 for p in e.p2))
    except KeyError:
        kinds_ok = False
    if not kinds_ok:
        out.append("primitive kind")
    grid = set(e.grid)
    comps = list(e.seen) + list(e.unseen)
    if any(c not in grid or c not in dataset.by_composition for c in comps):
        out.append("composition outside episode grid or dataset")
    seen, unseen = set(e.seen), set(e.unseen)
    if seen & unseen or len(seen) != len(e.seen) or len(unseen) != len(e.unseen):
        out.append("seen/unseen overlap")
    if not unseen:
        out.append("no unseen composition")
    n_s, n_q = len(seen), len(seen) + len(unseen)
    if not (n + 1 <= n_s <= n_q - 1):
        out.append("N^c_s out of range")
    ks = cfg.k_support if cfg else None
    kq = cfg.k_query if cfg else None
    sup_counts: dict[Composition, int] = {}
    for _, c in e.support:
        sup_counts[c] = sup_counts.get(c, 0) + 1
    qry_counts: dict[Composition, int] = {}
    for _, c in e.query:
        qry_counts[c] = qry_counts.get(c, 0) + 1
    if ks is None and sup_counts:
        ks = next(iter(sup_counts.values()))
    if kq is None and qry_counts:
        kq = next(iter(qry_counts.values()))
    if set(sup_counts) != seen or any(v != ks for v in sup_counts.values()):
        out.append("support count")
    if set(qry_counts) != seen | unseen or any(v != kq for v in qry_counts.values()):
        out.append("query count")
    sup_ids = [s for s, _ in e.support]
    qry_ids = [s for s, _ in e.query]
    if (set(sup_ids) & set(qry_ids)) or len(set(sup_ids)) != len(sup_ids) or len(set(qry_ids)) != len(qry_ids):
        out.append("support/query overlap")
    try:
        if any(dataset.label_of(s) != c for s, c in list(e.support) + list(e.query)):
            out.append("sample label mismatch")
    except KeyError:
        out.append("sample label mismatch")
    return out


# ---------------------------------------------------------------------------
# replay format
# ---------------------------------------------------------------------------
#   czsl-episode 1
#   p1      <name> ...
#   p2      <name> ...
#   seen    <type1>/<type2> ...
#   unseen  <type1>/<type2> ...
#   support <id>:<type1>/<type2> ...
#   query   <id>:<type1>/<type2> ...

def episode_to_text(e: Episode, dataset: Dataset) -> str:
    name = lambda p: dataset.primitive(p).name  # noqa: E731
    lines = ["czsl-episode 1",
             "\t".join(["p1"] + [name(p) for p in e.p1]),
             "\t".join(["p2"] + [name(p) for p in e.p2]),
             "\t".join(["seen"] + [dataset.comp_name(c) for c in e.seen]),
             "\t".join(["unseen"] + [dataset.comp_name(c) for c in e.unseen]),
             "\t".join(["support"] + [f"{s}:{dataset.comp_name(c)}" for s, c in e.support]),
             "\t".join(["query"] + [f"{s}:{dataset.comp_name(c)}" for s, c in e.query])]
    return "\n".join(lines) + "\n"


def episode_from_text(text: str, dataset: Dataset) -> Episode:
    rows = [ln.split("\t") for ln in text.strip("\n").split("\n")]
    if not rows or rows[0] != ["czsl-episode 1"]:
        raise EpisodeError("missing 'czsl-episode 1' header")
    body = {r[0]: r[1:] for r in rows[1:]}
    if set(body) != {"p1", "p2", "seen", "unseen", "support", "query"}:
        raise EpisodeError(f"unexpected episode fields {sorted(body)}")

    def comp(s: str) -> Composition:
        a, b = s.split("/")
        return Composition(dataset.find(a, Kind.TYPE1).id, dataset.find(b, Kind.TYPE2).id)

    def items(key):
        out = []
        for tok in body[key]:
            sid, c = tok.split(":", 1)
            out.append((int(sid), comp(c)))
        return tuple(out)

    return Episode(tuple(dataset.find(n, Kind.TYPE1).id for n in body["p1"]),
                   tuple(dataset.find(n, Kind.TYPE2).id for n in body["p2"]),
                   tuple(comp(s) for s in body["seen"]),
                   tuple(comp(s) for s in body["unseen"]),
                   items("support"), items("query"))


def save_episodes(episodes: list[Episode], dataset: Dataset, path) -> None:
    Path(path).write_text("".join(episode_to_text(e, dataset) for e in episodes), encoding="utf-8")


def load_episodes(path, dataset: Dataset) -> list[Episode]:
    text = Path(path).read_text(encoding="utf-8")
    chunks = [c for c in text.split("czsl-episode 1\n") if c.strip()]
    return [episode_from_text("czsl-episode 1\n" + c, dataset) for c in chunks]
