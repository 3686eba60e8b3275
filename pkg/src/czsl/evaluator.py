"""Seen/unseen accuracy, harmonic mean, confidence intervals, error ratio."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Composition
from .sampler import Episode


class EmptyPartitionError(ValueError):
    pass


class TooFewEpisodesError(ValueError):
    pass


class UndefinedRatioError(ZeroDivisionError):
    """No unseen query was confused for another unseen pair."""

    def __init__(self, u2s: int):
        self.u2s = u2s
        super().__init__(f"error ratio undefined: U->U = 0 (U->S = {u2s})")


@dataclass(frozen=True)
class EpisodeResult:
    """Per-query (true, predicted) grid indices plus the episode partition."""

    true: tuple[int, ...]
    pred: tuple[int, ...]
    unseen: tuple[bool, ...]
    seen_set: frozenset[int]
    unseen_set: frozenset[int]

    def __post_init__(self):
        if not len(self.true) == len(self.pred) == len(self.unseen):
            raise ValueError("true/pred/unseen lengths differ")
        for t, u in zip(self.true, self.unseen):
            if (t in self.unseen_set) != u or (not u and t not in self.seen_set):
                raise ValueError("unseen flag inconsistent with the episode partition")

    @classmethod
    def from_episode(cls, episode: Episode, predictions) -> "EpisodeResult":
        pred = [episode.comp_index(p) if isinstance(p, Composition) else int(p) for p in predictions]
        true = [episode.comp_index(c) for _, c in episode.query]
        unseen = frozenset(episode.comp_index(c) for c in episode.unseen)
        seen = frozenset(episode.comp_index(c) for c in episode.seen)
        return cls(tuple(true), tuple(pred), tuple(t in unseen for t in true), seen, unseen)

    def counts(self) -> dict[str, int]:
        t, p, u = np.array(self.true), np.array(self.pred), np.array(self.unseen, dtype=bool)
        ok = t == p
        return {"seen_total": int((~u).sum()), "seen_correct": int((ok & ~u).sum()),
                "unseen_total": int(u.sum()), "unseen_correct": int((ok & u).sum())}


def episode_accuracy(r: EpisodeResult) -> tuple[float, float]:
    """(seen accuracy, unseen accuracy) as fractions."""
    c = r.counts()
    if c["seen_total"] == 0 or c["unseen_total"] == 0:
        raise EmptyPartitionError("episode result needs both seen and unseen queries")
    return c["seen_correct"] / c["seen_total"], c["unseen_correct"] / c["unseen_total"]


def harmonic_mean(sa: float, ua: float) -> float:
    if sa < 0 or ua < 0:
        raise ValueError("accuracies must be non-negative")
    if sa + ua == 0:
        return 0.0
    return 2.0 * sa * ua / (sa + ua)


def error_counts(results: list[EpisodeResult]) -> dict[str, int]:
    """Wrong predictions on unseen queries, bucketed by where they landed."""
    u2s = u2u = u2x = 0
    for r in results:
        for t, p, u in zip(r.true, r.pred, r.unseen):
            if not u or t == p:
                continue
            if p in r.seen_set:
                u2s += 1
            elif p in r.unseen_set:
                u2u += 1
            else:
                u2x += 1
    return {"u2s": u2s, "u2u": u2u, "u2x": u2x}


def error_ratio(results: list[EpisodeResult]) -> float:
    c = error_counts(results)
    if c["u2u"] == 0:
        raise UndefinedRatioError(c["u2s"])
    return c["u2s"] / c["u2u"]


@dataclass(frozen=True)
class MetricsReport:
    ua: float
    sa: float
    hm: float
    ua_ci95: float
    sa_ci95: float
    hm_ci95: float
    error_ratio: float | None
    u2s: int
    u2u: int
    u2x: int
    n_episodes: int
    n_seeds: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _ci95(x: np.ndarray) -> float:
    return float(1.96 * x.std(ddof=1) / math.sqrt(len(x)))


def aggregate(results: list[EpisodeResult], n_seeds: int = 1) -> MetricsReport:
    """Mean UA/SA over episodes (percent); HM from the aggregated SA and UA.

    ``hm_ci95`` uses the spread of per-episode harmonic means.
    """
    if len(results) < 2:
        raise TooFewEpisodesError("aggregate needs at least 2 episodes")
    accs = np.array([episode_accuracy(r) for r in results]) * 100.0
    sa, ua = accs[:, 0], accs[:, 1]
    per_hm = np.array([harmonic_mean(s, u) for s, u in accs])
    counts = error_counts(results)
    ratio = counts["u2s"] / counts["u2u"] if counts["u2u"] else None
    SA, UA = float(sa.mean()), float(ua.mean())
    return MetricsReport(UA, SA, harmonic_mean(SA, UA), _ci95(ua), _ci95(sa), _ci95(per_hm),
                         ratio, counts["u2s"], counts["u2u"], counts["u2x"], len(results), n_seeds)


def seed_summary(reports: list[MetricsReport]) -> dict:
    """Mean and std over per-seed reports."""
    out: dict = {"n_seeds": len(reports)}
    for key in ("ua", "sa", "hm"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    ratios = [r.error_ratio for r in reports if r.error_ratio is not None]
    out["error_ratio"] = float(np.mean(ratios)) if ratios else None
    return out


def format_table(records: list[dict]) -> str:
    """Aligned text table: one row per (method, K_s) with UA/SA/HM +- ci95."""
    head = ["method", "K_s", "seed", "UA", "SA", "HM", "U->S/U->U", "episodes"]
    rows = []
    for r in records:
        ratio = r.get("error_ratio")
        rows.append([str(r["method"]), str(r["k_support"]), str(r.get("seed", "-")),
                     f"{r['ua']:.2f} +- {r['ua_ci95']:.2f}",
                     f"{r['sa']:.2f} +- {r['sa_ci95']:.2f}",
                     f"{r['hm']:.2f} +- {r['hm_ci95']:.2f}",
                     "undefined" if ratio is None else f"{ratio:.3f}",
                     str(r["n_episodes"])])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(head), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines)
