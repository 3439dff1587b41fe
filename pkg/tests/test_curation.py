import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compnet.curation import (AttributeScore, CooccurrenceTable, CurationError, SynonymMap,
                              canonicalize, curate_corpus, fit_probe, probe_scores,
                              rank_attributes, read_visualness, score_attributes, sharedness,
                              sharedness_raw, synthetic_corpus, visualness, write_ranking)

RELATIVE = SynonymMap({"smaller": "small", "smallest": "small", "bigger": "big", "cars": "car"})


def test_canonicalize_examples():
    assert canonicalize(["smaller", "smallest"], RELATIVE) == ["small", "small"]
    assert canonicalize(["small", "car"], RELATIVE) == ["small", "car"]
    assert canonicalize(["zebra"], RELATIVE) == ["zebra"]


@given(st.lists(st.sampled_from(["smaller", "smallest", "small", "bigger", "cars", "red", "x"])))
def test_canonicalize_idempotent(labels):
    once = canonicalize(labels, RELATIVE)
    assert canonicalize(once, RELATIVE) == once


def test_synonym_map_rejects_chains(tmp_path):
    with pytest.raises(CurationError):
        SynonymMap({"a": "b", "b": "c"})
    SynonymMap({"a": "b", "b": "b"})
    p = tmp_path / "syn.tsv"
    p.write_text("# raw\tcanonical\nsmaller\tsmall\nsmallest\tsmall\n")
    assert SynonymMap.from_tsv(p)("smallest") == "small"
    p.write_text("smaller small\n")
    with pytest.raises(CurationError, match="syn.tsv:1"):
        SynonymMap.from_tsv(p)


def test_visualness_examples():
    assert visualness([5, 4, 3, 2, 1, 0, 0], [1, 1, 1, 1, 1, 0, 0]) == 1.0
    assert visualness(np.arange(8.0), np.zeros(8)) == 0.0
    with pytest.raises(CurationError):
        visualness([1, 2, 3], [1, 0, 1])


@given(st.lists(st.floats(-5, 5), min_size=5, max_size=30), st.data())
def test_visualness_is_a_fifth(scores, data):
    pos = data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
    v = visualness(scores, pos)
    assert v in {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}


def test_planted_probe_beats_random_labels():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 8))
    planted = X[:, 0] > 1.0
    noise = rng.random(400) < planted.mean()
    v_planted = visualness(probe_scores(fit_probe(X[:200], planted[:200]), X[200:]), planted[200:])
    v_noise = visualness(probe_scores(fit_probe(X[:200], noise[:200]), X[200:]), noise[200:])
    assert v_planted > v_noise


def hand_table():
    # a: 3 objects above T=5, b: only one, c: all counts at or below T
    counts = np.array([[10, 10, 10], [30, 0, 0], [5, 5, 5]])
    return CooccurrenceTable(["a", "b", "c"], ["x", "y", "z"], counts)


def test_sharedness_hand_computed():
    t = hand_table()
    N = 75
    raw = sharedness_raw(t, threshold=5)
    np.testing.assert_allclose(raw, [3 * math.log(N / 30), math.log(N / 30), 0.0])
    s = sharedness(t, threshold=5)
    assert s["a"] == 1.0 and s["c"] == 0.0
    assert s["b"] == pytest.approx(1 / 3)


def test_sharedness_exclusive_attribute_is_lowest():
    counts = np.array([[20, 20, 0], [40, 0, 0], [0, 20, 20]])
    s = sharedness(CooccurrenceTable(["shared", "exclusive", "other"], list("xyz"), counts), 5)
    assert s["exclusive"] < min(s["shared"], s["other"])


def test_sharedness_degenerate_and_zero():
    t = CooccurrenceTable(["a", "b"], ["x", "y"], np.array([[10, 10], [10, 10]]))
    assert sharedness(t) == {"a": 1.0, "b": 1.0}
    t = CooccurrenceTable(["a", "b"], ["x", "y"], np.array([[10, 10], [0, 0]]))
    assert sharedness_raw(t)[1] == 0.0


@given(st.integers(0, 5), st.integers(6, 40))
def test_sharedness_monotone_in_partners(k, extra):
    n_a = 60
    row1 = [n_a // 6] * 6
    row2 = [n_a] + [0] * 5
    counts = np.array([row1, row2, [extra] * 6])
    raw = sharedness_raw(CooccurrenceTable(list("abc"), list("uvwxyz"), counts), threshold=k)
    assert raw[0] >= raw[1]


def test_table_validation_and_csv(tmp_path):
    with pytest.raises(CurationError):
        CooccurrenceTable(["a"], ["x"], np.array([[-1]]))
    with pytest.raises(CurationError):
        CooccurrenceTable(["a"], ["x", "y"], np.array([[1]]))
    p = tmp_path / "co.csv"
    p.write_text("attribute,object,count\nsmaller,car,4\nsmall,car,3\nred,bus,9\n")
    t = CooccurrenceTable.from_csv(p, RELATIVE)
    assert t.attributes == ["red", "small"] and t.counts[1, t.objects.index("car")] == 7
    assert t.attribute_totals.tolist() == [9, 7] and t.total == 16
    p.write_text("a,x,1\nb,y,zz\n")
    with pytest.raises(CurationError, match="co.csv:2"):
        CooccurrenceTable.from_csv(p)


def test_ranking_rules():
    r = rank_attributes([AttributeScore("b", 1.0, 0.5), AttributeScore("a", 1.0, 1.0),
                         AttributeScore("c", 0.0, 1.0)])
    assert [s.attribute for s in r] == ["a", "b", "c"]
    assert r[-1].product == 0.0
    with pytest.raises(CurationError):
        AttributeScore("x", 1.2, 0.0)


@given(st.permutations(range(5)))
def test_ranking_order_independent(perm):
    scores = [AttributeScore(n, v, s) for n, v, s in
              [("a", 1, .5), ("b", .5, 1), ("c", .2, .2), ("d", 0, 1), ("e", 1, 1)]]
    assert rank_attributes([scores[i] for i in perm]) == rank_attributes(scores)


def test_score_attributes_and_io(tmp_path):
    vis = {"a": 1.0, "b": 0.8, "c": 0.2}
    ranked = score_attributes(hand_table(), vis, 5)
    assert [s.attribute for s in ranked] == ["a", "b", "c"]
    with pytest.raises(CurationError):
        score_attributes(hand_table(), {"a": 1.0}, 5)
    out = tmp_path / "r.csv"
    write_ranking(out, ranked)
    assert out.read_text().splitlines()[0] == "attribute,visualness,sharedness,product"
    v = tmp_path / "v.csv"
    v.write_text("attribute,visualness\na,0.4\n")
    assert read_visualness(v) == {"a": 0.4}


def test_synthetic_corpus_ranks_planted_first():
    ranked = curate_corpus(synthetic_corpus(0))
    names = [s.attribute for s in ranked]
    assert names[0] == "glossy"
    by = {s.attribute: s for s in ranked}
    assert by["aerodynamic"].sharedness == 0.0
    assert by["lucky"].visualness < by["glossy"].visualness
