import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acsa.corpus import (
    CorpusFormatError,
    LabelError,
    build_labels,
    dumps_corpus,
    generate_synthetic,
    labels_from_ids,
    load_corpus,
    loads_corpus,
    save_corpus,
)
from acsa.numerics import cosine


def _manifest(dim=2, m_max=10):
    return {"type": "manifest", "dim": dim, "k": 4, "m_max": m_max, "version": 1}


def _image(rid, ident, dim=2, n_slices=6):
    return {
        "type": "image",
        "id": rid,
        "identity": ident,
        "global": [1.0] * dim,
        "slices": [[float(i), 1.0] + [0.0] * (dim - 2) for i in range(n_slices)],
    }


def _text(rid, ident, dim=2, n_phrases=2):
    return {
        "type": "text",
        "id": rid,
        "identity": ident,
        "global": [0.5] * dim,
        "phrases": [[1.0, float(j)] + [0.0] * (dim - 2) for j in range(n_phrases)],
    }


def _lines(*records):
    return "\n".join(json.dumps(r) for r in records) + "\n"


def test_load_small_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(_lines(_manifest(), _image("a", 0), _image("b", 1), _text("x", 0), _text("y", 1)))
    manifest, images, texts = load_corpus(path)
    assert manifest.dim == 2 and len(images) == 2 and len(texts) == 2
    # regions come from the slices: head = mean(s1, s2)
    np.testing.assert_array_equal(images[0].regions[0], [0.5, 1.0])
    assert images[0].entities.shape == (5, 2)


def test_five_slices_rejected_with_record_id():
    with pytest.raises(CorpusFormatError) as exc:
        loads_corpus(_lines(_manifest(), _image("a", 0), _image("bad-one", 0, n_slices=5)))
    assert exc.value.record_id == "bad-one"
    assert "bad-one" in str(exc.value)


def test_missing_manifest():
    with pytest.raises(CorpusFormatError):
        loads_corpus(_lines(_image("a", 0)))
    with pytest.raises(CorpusFormatError):
        loads_corpus("")


def test_dim_mismatch_names_record():
    with pytest.raises(CorpusFormatError, match="t9"):
        loads_corpus(_lines(_manifest(dim=2), _text("t9", 0, dim=3)))


def test_round_trip_bit_exact(tmp_path):
    corpus = generate_synthetic(5, 2, 2, 8, 0.3, seed=11)
    path = tmp_path / "c.jsonl"
    save_corpus(path, corpus)
    back = load_corpus(path)
    assert back.manifest == corpus.manifest
    for a, b in zip(corpus.images + corpus.texts, back.images + back.texts):
        assert a.id == b.id and a.identity == b.identity
        assert a.global_emb.tobytes() == b.global_emb.tobytes()
    for a, b in zip(corpus.images, back.images):
        assert a.slices.tobytes() == b.slices.tobytes()
    for a, b in zip(corpus.texts, back.texts):
        assert a.phrases.tobytes() == b.phrases.tobytes()
    assert dumps_corpus(back) == dumps_corpus(corpus)


# -- mutation fuzzing ----------------------------------------------------------

VALID = [_manifest(dim=3, m_max=3), _image("i0", 0, 3), _image("i1", 1, 3), _text("t0", 0, 3), _text("t1", 1, 3, 3)]


def _set(key, value):
    def f(rec):
        rec[key] = value

    return f


def _drop(key):
    def f(rec):
        del rec[key]

    return f


def _nested(key, fn):
    def f(rec):
        fn(rec[key])

    return f


IMAGE_MUTATIONS = {
    "slice_count_5": _nested("slices", lambda s: s.pop()),
    "slice_count_7": _nested("slices", lambda s: s.append([0.0, 0.0, 0.0])),
    "slice_short": _nested("slices", lambda s: s[2].pop()),
    "global_long": _nested("global", lambda g: g.append(1.0)),
    "global_nan": _nested("global", lambda g: g.__setitem__(0, float("nan"))),
    "global_str": _nested("global", lambda g: g.__setitem__(1, "x")),
    "negative_identity": _set("identity", -1),
    "float_identity": _set("identity", 1.5),
    "bool_identity": _set("identity", True),
    "no_slices": _drop("slices"),
    "no_id": _drop("id"),
    "empty_id": _set("id", ""),
    "extra_key": _set("phrases", []),
    "bad_type": _set("type", "video"),
}

TEXT_MUTATIONS = {
    "no_phrases": _set("phrases", []),
    "too_many_phrases": _nested("phrases", lambda p: p.extend([[1.0, 0.0, 0.0]] * 3)),
    "phrase_short": _nested("phrases", lambda p: p[0].pop()),
    "phrase_inf": _nested("phrases", lambda p: p[0].__setitem__(0, float("inf"))),
    "global_missing": _drop("global"),
    "identity_str": _set("identity", "3"),
}


def _expected_id(rec):
    rid = rec.get("id")
    return rid if isinstance(rid, str) and rid else None


@pytest.mark.parametrize("target", [1, 2])
@pytest.mark.parametrize("mutation", sorted(IMAGE_MUTATIONS))
def test_image_mutations_rejected(mutation, target):
    records = copy.deepcopy(VALID)
    IMAGE_MUTATIONS[mutation](records[target])
    with pytest.raises(CorpusFormatError) as exc:
        loads_corpus(_lines(*records))
    assert exc.value.record_id == _expected_id(records[target])
    assert exc.value.line == target + 1


@pytest.mark.parametrize("target", [3, 4])
@pytest.mark.parametrize("mutation", sorted(TEXT_MUTATIONS))
def test_text_mutations_rejected(mutation, target):
    records = copy.deepcopy(VALID)
    TEXT_MUTATIONS[mutation](records[target])
    with pytest.raises(CorpusFormatError) as exc:
        loads_corpus(_lines(*records))
    assert exc.value.record_id == _expected_id(records[target])
    assert exc.value.line == target + 1


def test_duplicate_id_rejected():
    records = copy.deepcopy(VALID)
    records[2]["id"] = "i0"
    with pytest.raises(CorpusFormatError, match="duplicate"):
        loads_corpus(_lines(*records))


@pytest.mark.parametrize(
    "field,value", [("dim", 1), ("k", 5), ("m_max", 0), ("version", 2), ("dim", "3")]
)
def test_bad_manifest(field, value):
    records = copy.deepcopy(VALID)
    records[0][field] = value
    with pytest.raises(CorpusFormatError):
        loads_corpus(_lines(*records))


def test_unmutated_and_benign_edits_accepted():
    records = copy.deepcopy(VALID)
    records[1]["global"] = [0, 1, 2]  # integers are valid numbers
    records[4]["phrases"] = records[4]["phrases"][:1]  # one phrase is enough
    corpus = loads_corpus(_lines(*records))
    assert len(corpus.images) == 2 and len(corpus.texts) == 2


def test_invalid_json_reports_line():
    with pytest.raises(CorpusFormatError) as exc:
        loads_corpus(_lines(_manifest()) + "{not json\n")
    assert exc.value.line == 2


# -- labels --------------------------------------------------------------------


def test_labels_identity():
    lab = labels_from_ids([1, 2], [1, 2])
    np.testing.assert_array_equal(lab.y, np.eye(2))
    np.testing.assert_array_equal(lab.q, np.eye(2))


def test_labels_two_positives():
    np.testing.assert_array_equal(labels_from_ids([1], [1, 1]).q, [[0.5, 0.5]])


def test_labels_row_without_positive():
    with pytest.raises(LabelError):
        labels_from_ids([1, 3], [1, 2]).q


@given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_q_rows_sum_to_one(ids):
    lab = labels_from_ids(ids, ids)
    np.testing.assert_allclose(lab.q.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(lab.q > 0, lab.y == 1)


def test_build_labels_uses_identities():
    corpus = generate_synthetic(3, 1, 2, 4, 0.1, 0)
    lab = build_labels(corpus.images, corpus.texts)
    assert lab.y.shape == (3, 6)
    assert lab.y.sum() == 6


# -- synthetic generator -------------------------------------------------------


def test_noiseless_globals_align_through_the_map():
    corpus = generate_synthetic(6, 2, 2, 8, 0.0, seed=1)
    rot = corpus.text_map
    for im in corpus.images:
        for t in corpus.texts:
            if t.identity == im.identity:
                assert cosine(im.global_emb, rot.T @ t.global_emb) == pytest.approx(1.0, abs=1e-12)


def test_generator_is_deterministic():
    a = generate_synthetic(4, 2, 3, 6, 0.2, seed=5)
    b = generate_synthetic(4, 2, 3, 6, 0.2, seed=5)
    assert dumps_corpus(a) == dumps_corpus(b)
    assert dumps_corpus(a) != dumps_corpus(generate_synthetic(4, 2, 3, 6, 0.2, seed=6))


def test_generator_counts_and_phrase_bounds():
    corpus = generate_synthetic(7, 3, 2, 5, 0.1, seed=2, m_max=4)
    assert len(corpus.images) == 21 and len(corpus.texts) == 14
    assert all(1 <= len(t.phrases) <= 4 for t in corpus.texts)
    assert all(im.slices.shape == (6, 5) for im in corpus.images)


@pytest.mark.parametrize("kwargs", [{"d": 3}, {"sigma": -0.1}, {"n_identities": 0}])
def test_generator_preconditions(kwargs):
    args = dict(n_identities=2, imgs_per_id=1, txts_per_id=1, d=4, sigma=0.1, seed=0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_synthetic(**args)


def nn_global_accuracy(corpus) -> float:
    """Brute force: for each text, map its global back and find the nearest image."""
    rot = corpus.text_map
    hits = 0
    for t in corpus.texts:
        back = rot.T @ t.global_emb
        best = max(corpus.images, key=lambda im: cosine(im.global_emb, back))
        hits += best.identity == t.identity
    return hits / len(corpus.texts)


def test_nearest_neighbour_accuracy_low_noise():
    assert nn_global_accuracy(generate_synthetic(50, 2, 2, 32, 0.05, seed=0)) >= 0.99


def test_accuracy_non_increasing_in_noise():
    means = []
    for sigma in (0.0, 0.1, 0.5, 2.0):
        means.append(np.mean([nn_global_accuracy(generate_synthetic(30, 1, 1, 8, sigma, s)) for s in range(5)]))
    assert all(a >= b for a, b in zip(means, means[1:])), means


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_any_seed(seed):
    corpus = generate_synthetic(2, 1, 1, 4, 1.0, seed)
    assert dumps_corpus(loads_corpus(dumps_corpus(corpus))) == dumps_corpus(corpus)
