import dataclasses

import numpy as np
import pytest

from czsl import diffcore as dc
from czsl.baselines import le_fit_infer, visprod_fit, visprod_fit_infer, visprod_probs
from czsl.dataset import EmbeddingProvider, Split, generate_synthetic
from czsl.encoder import init_backbone
from czsl.evaluator import EpisodeResult, episode_accuracy
from czsl.metalearn import FeatureBank
from czsl.sampler import EpisodeConfig, sample_episode


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(5, 5, 10, 16, 0.0, seed=2)
    bb = dataclasses.replace(init_backbone(np.random.default_rng(0)), pretrained=True)
    bank = FeatureBank(ds, bb)
    prov = EmbeddingProvider(32, seed=0)
    for p in ds.primitives:
        prov.register(p)
    eps = [sample_episode(ds, Split.TRAIN, EpisodeConfig(), np.random.default_rng(i)) for i in range(6)]
    return ds, bb, bank, prov, eps


def _heads(n1, n2, c, rng):
    return dc.ParamTree([("vp.t1.w", rng.normal(size=(c, n1))), ("vp.t1.b", rng.normal(size=n1)),
                         ("vp.t2.w", rng.normal(size=(c, n2))), ("vp.t2.b", rng.normal(size=n2))])


def test_visprod_factorizes(setup):
    _, _, bank, _, eps = setup
    e = eps[0]
    rng = np.random.default_rng(1)
    P = _heads(5, 5, bank.pooled.shape[1], rng)
    x = bank(e.query_ids())
    probs = visprod_probs(P, x, e)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    grid = probs.reshape(-1, 5, 5)
    p1, p2 = grid.sum(2), grid.sum(1)
    np.testing.assert_allclose(grid, p1[:, :, None] * p2[:, None, :], atol=1e-14)


def test_visprod_one_hot_heads(setup):
    _, _, _, _, eps = setup
    e = eps[0]
    P = dc.ParamTree([("vp.t1.w", np.zeros((2, 5))), ("vp.t1.b", np.eye(5)[3] * 50),
                      ("vp.t2.w", np.zeros((2, 5))), ("vp.t2.b", np.eye(5)[1] * 50)])
    probs = visprod_probs(P, np.ones((1, 2)), e)
    assert np.argmax(probs[0]) == 3 * 5 + 1


def test_visprod_uniform_ties_lowest(setup):
    _, _, _, _, eps = setup
    P = dc.ParamTree([("vp.t1.w", np.zeros((2, 5))), ("vp.t1.b", np.zeros(5)),
                      ("vp.t2.w", np.zeros((2, 5))), ("vp.t2.b", np.zeros(5))])
    probs = visprod_probs(P, np.ones((3, 2)), eps[0])
    assert np.all(probs == probs[0, 0]) and np.all(np.argmax(probs, 1) == 0)


def test_visprod_fit_learns_support(setup):
    ds, bb, bank, _, eps = setup
    e = eps[1]
    P = visprod_fit(e, bank(e.support_ids()), 100, 1e-2, 4, np.random.default_rng(0))
    x0 = bank(e.support_ids())
    with dc.no_grad():
        logits = (dc.Tensor(x0) @ P["vp.t1.w"] + P["vp.t1.b"]).data
    idx = {p: i for i, p in enumerate(e.p1)}
    acc = np.mean(np.argmax(logits, 1) == [idx[c.p1] for _, c in e.support])
    assert acc > 0.2


def test_predictions_in_grid_and_deterministic(setup):
    ds, bb, bank, prov, eps = setup
    e = eps[2]
    grid = set(e.grid)
    for fn in (lambda r: visprod_fit_infer(e, bb, rng=r, dataset=ds, features=bank),
               lambda r: le_fit_infer(e, bb, prov, rng=r, dataset=ds, features=bank)):
        a = fn(np.random.default_rng(5))
        assert len(a) == len(e.query) and set(a) <= grid
        assert a == fn(np.random.default_rng(5))


def test_zero_iteration_fit_is_init_determined(setup):
    ds, bb, bank, prov, eps = setup
    e = eps[3]
    a = le_fit_infer(e, bb, prov, iters=0, rng=np.random.default_rng(9), dataset=ds, features=bank)
    b = le_fit_infer(e, bb, prov, iters=0, rng=np.random.default_rng(9), dataset=ds, features=bank)
    assert a == b


def test_backbone_path_matches_bank_without_standardizing(setup):
    ds, bb, _, _, eps = setup
    raw = FeatureBank(ds, bb, standardize=False)
    e = eps[4]
    a = visprod_fit_infer(e, bb, rng=np.random.default_rng(3), dataset=ds)
    b = visprod_fit_infer(e, bb, rng=np.random.default_rng(3), dataset=ds, features=raw)
    assert a == b


def test_le_seen_accuracy_above_chance(setup):
    ds, bb, bank, prov, eps = setup
    sa = []
    for i, e in enumerate(eps):
        pred = le_fit_infer(e, bb, prov, rng=np.random.default_rng(i), dataset=ds, features=bank)
        sa.append(episode_accuracy(EpisodeResult.from_episode(e, pred))[0])
    assert np.mean(sa) > 1 / 25
