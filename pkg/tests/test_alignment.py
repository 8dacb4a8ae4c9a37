import numpy as np
import pytest

import oracles
from acsa.alignment import (
    AttentionConfig,
    batch_scores,
    pad_phrases,
    raw_similarity,
    score_i2t,
    score_pair,
    score_t2i,
)
from acsa.corpus import generate_synthetic
from acsa.numerics import UsageError

UNIT = AttentionConfig(lambda1=1.0, lambda1_prime=1.0)
V0 = [[1.0, 0.0]]
T12 = [[1.0, 0.0], [0.0, 1.0]]
# confirmed with tests/oracles.py before the implementation existed
WORKED_I2T = 0.938507899795083


def random_instance(rng, k1=5, m=None, d=None):
    d = d or int(rng.integers(2, 17))
    m = m or int(rng.integers(1, 11))
    return rng.standard_normal((k1, d)), rng.standard_normal((m, d))


def test_raw_similarity():
    assert raw_similarity([1, 0], [1, 0]) == 1.0
    assert raw_similarity([1, 0], [0, 1]) == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 8))
    assert raw_similarity(a, b) == pytest.approx(oracles.cosine(a.tolist(), b.tolist()), abs=1e-14)


def test_worked_instance_i2t():
    s, terms = score_i2t(V0, T12, UNIT)
    assert s == pytest.approx(0.93851, abs=1e-5)
    assert s == pytest.approx(WORKED_I2T, abs=1e-12)
    assert terms.shape == (1,)


def test_worked_instance_t2i():
    s, terms = score_t2i(V0, T12, UNIT)
    assert s == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(terms, [1.0, 0.0], atol=1e-12)
    for lam in (0.1, 20.0, 1e3):
        assert score_t2i(V0, T12, AttentionConfig(1.0, lam))[0] == pytest.approx(0.5, abs=1e-12)


def test_identical_vectors_score_one():
    u = np.array([0.6, 0.8, 0.0])
    pair = score_pair(np.tile(u, (5, 1)), np.tile(u, (3, 1)))
    assert pair.i2t == pytest.approx(1.0, abs=1e-12)
    assert pair.t2i == pytest.approx(1.0, abs=1e-12)
    single = score_pair([u], [u])
    assert single.i2t == pytest.approx(1.0) and single.t2i == pytest.approx(1.0)


def test_large_lambda_is_hard_attention():
    rng = np.random.default_rng(4)
    v, p = random_instance(rng, d=6, m=4)
    cfg = AttentionConfig(lambda1=1e6)
    s = np.maximum(v @ p.T / np.outer(np.linalg.norm(v, axis=1), np.linalg.norm(p, axis=1)), 0)
    s_norm = s / np.sqrt((s**2).sum(axis=0, keepdims=True) + cfg.eps_norm)
    best = s_norm.argmax(axis=1)
    expected = np.mean([oracles.cosine(v[i].tolist(), p[best[i]].tolist()) for i in range(5)])
    assert score_i2t(v, p, cfg)[0] == pytest.approx(expected, abs=1e-6)


def test_oracle_equivalence_random():
    rng = np.random.default_rng(123)
    for _ in range(100):
        v, p = random_instance(rng)
        lam1, lam2 = rng.uniform(0.5, 30, 2)
        cfg = AttentionConfig(lam1, lam2)
        a, a_terms = score_i2t(v, p, cfg)
        b, b_terms = score_t2i(v, p, cfg)
        oa, oa_terms = oracles.i2t(v.tolist(), p.tolist(), lam1)
        ob, ob_terms = oracles.t2i(v.tolist(), p.tolist(), lam2)
        assert abs(a - oa) <= 1e-10 and abs(b - ob) <= 1e-10
        np.testing.assert_allclose(a_terms, oa_terms, atol=1e-10)
        np.testing.assert_allclose(b_terms, ob_terms, atol=1e-10)


def test_t2i_small_fixed_instance_matches_oracle():
    rng = np.random.default_rng(9)
    v, p = random_instance(rng, k1=5, m=3, d=6)
    assert score_t2i(v, p)[0] == pytest.approx(oracles.t2i(v.tolist(), p.tolist(), 20.0)[0], abs=1e-10)


def test_pair_invariants():
    assert np.mean(score_pair(V0, T12, UNIT).entity_terms) == score_pair(V0, T12, UNIT).i2t
    rng = np.random.default_rng(5)
    for _ in range(30):
        v, p = random_instance(rng)
        pair = score_pair(v, p)
        assert pair.i2t == pytest.approx(pair.entity_terms.mean(), abs=1e-15)
        assert pair.t2i == pytest.approx(pair.phrase_terms.mean(), abs=1e-15)
        assert -1 <= pair.i2t <= 1 and -1 <= pair.t2i <= 1
        assert np.all(np.abs(pair.entity_terms) <= 1) and np.all(np.abs(pair.phrase_terms) <= 1)


def test_asymmetry_exists():
    pair = score_pair(V0, T12, UNIT)
    assert pair.i2t != pytest.approx(pair.t2i, abs=0.1)


def test_permutation_invariance():
    rng = np.random.default_rng(6)
    for _ in range(30):
        v, p = random_instance(rng)
        base = score_pair(v, p)
        perm_p = score_pair(v, p[rng.permutation(len(p))])
        perm_v = score_pair(v[rng.permutation(len(v))], p)
        for other in (perm_p, perm_v):
            assert abs(other.i2t - base.i2t) <= 1e-12
            assert abs(other.t2i - base.t2i) <= 1e-12


def test_scale_invariance():
    rng = np.random.default_rng(7)
    for _ in range(30):
        v, p = random_instance(rng)
        base = score_pair(v, p)
        # one positive factor per modality: mixtures scale, cosines do not
        common = score_pair(v * rng.uniform(0.01, 100), p * rng.uniform(0.01, 100))
        assert abs(common.i2t - base.i2t) <= 1e-9
        assert abs(common.t2i - base.t2i) <= 1e-9
        # per-vector factors only cancel on the side that is never mixed
        per_entity = score_pair(v * rng.uniform(0.01, 100, (len(v), 1)), p)
        per_phrase = score_pair(v, p * rng.uniform(0.01, 100, (len(p), 1)))
        assert abs(per_entity.i2t - base.i2t) <= 1e-9
        assert abs(per_phrase.t2i - base.t2i) <= 1e-9


def test_per_phrase_scaling_moves_the_mixture():
    v = np.array([[1.0, 1.0]])
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    cfg = AttentionConfig(1.0, 1.0)
    assert score_i2t(v, p * [[1.0], [5.0]], cfg)[0] != pytest.approx(score_i2t(v, p, cfg)[0], abs=1e-3)


def test_uniform_attention_when_similarities_tie():
    # every phrase has the same cosine to the entity, so attention is 1/M
    v = np.array([[1.0, 0.0, 0.0]])
    p = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 0.0, 1.0]])
    s, _ = score_i2t(v, p)
    mean_phrase = p.mean(axis=0)
    assert s == pytest.approx(oracles.cosine(v[0].tolist(), mean_phrase.tolist()), abs=1e-12)


def test_all_negative_similarities_stay_finite():
    v = np.array([[1.0, 0.0], [0.9, 0.1]])
    p = np.array([[-1.0, 0.0], [-1.0, -0.2]])
    pair = score_pair(v, p)
    assert np.isfinite(pair.i2t) and np.isfinite(pair.t2i)


def test_preconditions():
    with pytest.raises(UsageError):
        score_i2t(np.ones((5, 3)), np.ones((2, 4)))
    with pytest.raises(UsageError):
        AttentionConfig(lambda1=0.0)
    with pytest.raises(UsageError):
        AttentionConfig(eps_norm=1e-3)


def test_entities_from_image_entity():
    corpus = generate_synthetic(2, 1, 1, 6, 0.1, 0)
    im, t = corpus.images[0], corpus.texts[0]
    assert score_pair(im, t).i2t == pytest.approx(score_pair(im.entities, t.phrases).i2t, abs=1e-15)
    only_global = score_i2t(im, t, AttentionConfig(entities="global"))[1]
    assert only_global.shape == (1,)


def test_batched_matches_per_pair():
    rng = np.random.default_rng(8)
    d = 7
    ents = rng.standard_normal((4, 5, d))
    texts = [rng.standard_normal((int(rng.integers(1, 8)), d)) for _ in range(3)]
    phrases, mask = pad_phrases(texts)
    i2t, t2i = batch_scores(ents, phrases, mask)
    for a in range(4):
        for b in range(3):
            pair = score_pair(ents[a], texts[b])
            assert abs(i2t[a, b] - pair.i2t) <= 1e-12
            assert abs(t2i[a, b] - pair.t2i) <= 1e-12
