import dataclasses

import numpy as np
import pytest

from czsl.dataset import Composition, Dataset, Kind, Primitive, Split, generate_synthetic
from czsl.sampler import (Episode, EpisodeConfig, SamplerExhaustedError, episode_from_text, episode_to_text,
                          load_episodes, sample_episode, save_episodes, validate_episode)


@pytest.fixture(scope="module")
def bench():
    return generate_synthetic(12, 12, 20, 16, 0.05, seed=0, n_splits=3)


CFG = EpisodeConfig()


def test_full_grid_candidates_and_range(bench):
    rng = np.random.default_rng(0)
    for _ in range(200):
        e = sample_episode(bench, Split.TEST, CFG, rng)
        assert len(e.candidates) == 20
        n_q = len(e.seen) + len(e.unseen)
        assert n_q == 25
        assert 6 <= len(e.seen) <= n_q - 1
        assert len(e.support) == 5 * len(e.seen)
        assert len(e.query) == 5 * n_q


def test_forced_candidates_split(bench):
    rng = np.random.default_rng(1)
    for _ in range(300):
        e = sample_episode(bench, Split.TRAIN, CFG, rng)
        a, b = e.candidates[:2]
        assert (a in e.seen) != (b in e.seen)
        assert (a in e.unseen) != (b in e.unseen)


def test_forced_choice_uses_both_orders(bench):
    rng = np.random.default_rng(2)
    first_seen = [sample_episode(bench, Split.TRAIN, CFG, rng) for _ in range(200)]
    frac = np.mean([e.candidates[0] in e.seen for e in first_seen])
    assert 0.35 < frac < 0.65


def test_determinism(bench):
    a = sample_episode(bench, Split.VAL, CFG, np.random.default_rng(42))
    b = sample_episode(bench, Split.VAL, CFG, np.random.default_rng(42))
    assert a == b


def test_primitives_stay_in_split(bench):
    rng = np.random.default_rng(3)
    for split in Split:
        e = sample_episode(bench, split, CFG, rng)
        assert all(bench.primitive_split[p] == split for p in e.p1 + e.p2)


def _matching_dataset(n=5):
    prims = [Primitive(i, f"a{i}", Kind.TYPE1) for i in range(n)] + \
            [Primitive(n + i, f"b{i}", Kind.TYPE2) for i in range(n)]
    labels = [Composition(i, n + i) for i in range(n) for _ in range(10)]
    imgs = np.zeros((len(labels), 3, 2, 2))
    return Dataset(prims, {p.id: Split.TRAIN for p in prims}, imgs, np.arange(len(labels)), labels)


def test_perfect_matching_exhausts():
    ds = _matching_dataset()
    with pytest.raises(SamplerExhaustedError):
        sample_episode(ds, Split.TRAIN, EpisodeConfig(max_attempts=50), np.random.default_rng(0))


def test_too_few_samples_per_composition(bench):
    with pytest.raises(SamplerExhaustedError, match="K_s"):
        sample_episode(bench, Split.TEST, EpisodeConfig(k_support=15, k_query=10), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(n_primitives=0)


# --- validator ------------------------------------------------------------------

def test_fresh_episode_valid(bench):
    e = sample_episode(bench, Split.TEST, CFG, np.random.default_rng(5))
    assert validate_episode(e, bench, CFG) == []


def test_injected_support_into_query(bench):
    e = sample_episode(bench, Split.TEST, CFG, np.random.default_rng(6))
    sid, c = e.support[0]
    q = list(e.query)
    i = next(k for k, (_, qc) in enumerate(q) if qc == c)
    q[i] = (sid, c)
    bad = dataclasses.replace(e, query=tuple(q))
    assert validate_episode(bad, bench, CFG) == ["support/query overlap"]


def test_empty_unseen(bench):
    e = sample_episode(bench, Split.TEST, CFG, np.random.default_rng(7))
    bad = dataclasses.replace(e, unseen=(), query=tuple((s, c) for s, c in e.query if c in e.seen))
    assert "no unseen composition" in validate_episode(bad, bench, CFG)


def test_other_violations_named(bench):
    e = sample_episode(bench, Split.TEST, CFG, np.random.default_rng(8))
    dup = dataclasses.replace(e, p1=(e.p1[0],) + e.p1[:-1])
    assert "duplicate primitive" in validate_episode(dup, bench, CFG)
    overlap = dataclasses.replace(e, unseen=e.unseen + (e.seen[0],))
    assert "seen/unseen overlap" in validate_episode(overlap, bench, CFG)
    short = dataclasses.replace(e, support=e.support[1:])
    assert "support count" in validate_episode(short, bench, CFG)


def test_ten_thousand_episodes_valid_and_covering(bench):
    rng = np.random.default_rng(9)
    seen_prims = set()
    for _ in range(10000):
        e = sample_episode(bench, Split.TEST, CFG, rng)
        assert validate_episode(e, bench, CFG) == []
        seen_prims.update(e.p1 + e.p2)
    assert seen_prims == {p.id for p in bench.primitives if bench.primitive_split[p.id] == Split.TEST}


# --- replay ---------------------------------------------------------------------

def test_text_roundtrip(bench, tmp_path):
    rng = np.random.default_rng(10)
    eps = [sample_episode(bench, Split.VAL, CFG, rng) for _ in range(3)]
    text = episode_to_text(eps[0], bench)
    back = episode_from_text(text, bench)
    assert back.p1 == eps[0].p1 and back.support == eps[0].support and back.query == eps[0].query
    assert validate_episode(back, bench, CFG) == []
    save_episodes(eps, bench, tmp_path / "eps.txt")
    loaded = load_episodes(tmp_path / "eps.txt", bench)
    assert [e.query for e in loaded] == [e.query for e in eps]


def test_grid_order_row_major(bench):
    e = sample_episode(bench, Split.TEST, CFG, np.random.default_rng(11))
    assert e.grid[7] == Composition(e.p1[1], e.p2[2])
    assert e.comp_index(Composition(e.p1[4], e.p2[0])) == 20
    assert isinstance(e, Episode)
