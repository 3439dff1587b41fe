import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compnet.inference import (BANK_MAGIC, ClassifierBank, CompositionScores, GridScorer,
                               InferenceError, export_bank, predict_shortlist, read_allow_list,
                               read_predictions, score_compositions, top_k_indices,
                               top_scores_truncate, write_predictions, prediction_record)
from compnet.model import CompNet, ModelConfig
from compnet.numerics import softmax


@pytest.fixture
def model():
    return CompNet(ModelConfig(8, 6, 5, 7, "mlp", [], seed=4)).eval()


def test_top_k_stable_ties():
    np.testing.assert_array_equal(top_k_indices(np.array([0.2, 0.5, 0.5, 0.1]), 2), [1, 2])
    with pytest.raises(InferenceError):
        top_k_indices(np.zeros(3), 0)


def test_shortlist_sizes_and_grid(model, rng):
    f = rng.standard_normal(6)
    sl = predict_shortlist(model, f, 3, 20)
    assert len(sl.attributes) == 3 and len(sl.objects) == 7
    assert len(sl.grid) == 21
    one = predict_shortlist(model, f, 1, 1)
    p_a, p_o = softmax(model.head_scores(f)[0]), softmax(model.head_scores(f)[1])
    assert one.grid == [(int(np.argmax(p_a)), int(np.argmax(p_o)))]


@given(st.integers(0, 1000), st.integers(1, 5), st.integers(1, 7))
def test_shortlist_matches_full_sort(seed, k_a, k_o):
    m = CompNet(ModelConfig(8, 6, 5, 7, "mlp", [], seed=seed % 7)).eval()
    f = np.random.default_rng(seed).standard_normal(6)
    sl = predict_shortlist(m, f, k_a, k_o)
    s_a = m.head_scores(f)[0]
    assert list(sl.attributes) == sorted(range(5), key=lambda a: (-s_a[a], a))[:k_a]


@given(st.integers(0, 1000), st.integers(1, 4), st.integers(1, 6))
def test_shortlist_growth_is_monotone(seed, k_a, k_o):
    m = CompNet(ModelConfig(8, 6, 5, 7, "mlp", [], seed=3)).eval()
    f = np.random.default_rng(seed).standard_normal(6)
    small = set(predict_shortlist(m, f, k_a, k_o).grid)
    assert small <= set(predict_shortlist(m, f, k_a + 1, k_o + 1).grid)


def test_scores_are_one_softmax_with_zero_fill(model, rng):
    f = rng.standard_normal(6)
    sl = predict_shortlist(model, f, 2, 3)
    sc = score_compositions(model, f, sl)
    assert sum(p for _, p in sc.items()) == pytest.approx(1.0)
    outside = next((a, o) for a in range(5) for o in range(7) if (a, o) not in sl.grid)
    assert sc[outside] == 0.0


def test_full_grid_matches_exhaustive_scoring(rng):
    m = CompNet(ModelConfig(8, 6, 10, 10, "mlp", [], seed=1)).eval()
    f = rng.standard_normal(6)
    sc = score_compositions(m, f, predict_shortlist(m, f, 10, 10))
    W, _ = m.compose_pairs(np.repeat(np.arange(10), 10), np.tile(np.arange(10), 10), train=False)
    exact = softmax(W[:, :-1] @ f + W[:, -1]).reshape(10, 10)
    for (a, o), p in sc.items():
        assert p == pytest.approx(exact[a, o], abs=1e-12)
    best = np.unravel_index(np.argmax(exact), exact.shape)
    assert sc.ranked()[0][0] == tuple(map(int, best))


def test_grid_scorer_matches_per_image(model, rng):
    F = rng.standard_normal((4, 6))
    dense = GridScorer(model).score(F, 2, 3)
    for i in range(4):
        sc = score_compositions(model, F[i], predict_shortlist(model, F[i], 2, 3))
        for (a, o), p in sc.items():
            assert dense[i, a, o] == pytest.approx(p, abs=1e-12)
        assert np.count_nonzero(dense[i]) == 6


def test_grid_scorer_product(model, rng):
    F = rng.standard_normal((2, 6))
    dense = GridScorer(model, "product").score(F, 5, 7)
    p_a, p_o = softmax(model.head_scores(F)[0]), softmax(model.head_scores(F)[1])
    np.testing.assert_allclose(dense, p_a[:, :, None] * p_o[:, None, :])


def test_truncate():
    sc = CompositionScores({(0, 0): 0.5, (0, 1): 0.3, (1, 0): 0.2})
    assert list(top_scores_truncate(sc, 2).probs) == [(0, 0), (0, 1)]
    with pytest.raises(InferenceError):
        top_scores_truncate(sc, 0)


def test_bank_roundtrip_is_bit_exact(model, tmp_path):
    bank = export_bank(model, [(4, 6), (0, 1), (2, 2)])
    assert [tuple(p) for p in bank.pairs] == [(0, 1), (2, 2), (4, 6)]
    path = tmp_path / "b.cnb"
    bank.save(path)
    raw = path.read_bytes()
    assert raw[:8] == BANK_MAGIC
    back = ClassifierBank.load(path)
    back.save(tmp_path / "c.cnb")
    assert (tmp_path / "c.cnb").read_bytes() == raw
    assert back.weights.tobytes() == bank.weights.tobytes()
    assert (1, 1) not in back and back.score((1, 1), np.zeros(6)) is None


def test_bank_prediction_matches_live(model, rng):
    bank = export_bank(model, [(a, o) for a in range(5) for o in range(7)])
    for _ in range(10):
        f = rng.standard_normal(6)
        sl = predict_shortlist(model, f, 3, 4)
        live, banked = score_compositions(model, f, sl), score_compositions(bank, f, sl)
        for pair, p in live.items():
            assert abs(banked[pair] - p) <= 1e-9


def test_pruned_bank_drops_pairs(model, rng):
    f = rng.standard_normal(6)
    sl = predict_shortlist(model, f, 5, 7)
    bank = export_bank(model, sl.grid[:3])
    sc = score_compositions(bank, f, sl)
    assert len(sc) == 3 and sum(p for _, p in sc.items()) == pytest.approx(1.0)


def test_bank_errors(model, tmp_path):
    with pytest.raises(InferenceError):
        export_bank(model, [])
    with pytest.raises(InferenceError):
        export_bank(model, [(9, 0)])
    bad = tmp_path / "x.cnb"
    bad.write_bytes(b"XX" * 20)
    with pytest.raises(InferenceError):
        ClassifierBank.load(bad)
    good = tmp_path / "g.cnb"
    export_bank(model, [(0, 0)]).save(good)
    good.write_bytes(good.read_bytes()[:-1])
    with pytest.raises(InferenceError):
        ClassifierBank.load(good)


def test_allow_list_and_prediction_io(tmp_path):
    p = tmp_path / "allow.csv"
    p.write_text("attribute,object\n1,2\n\n3,4\n")
    assert read_allow_list(p) == [(1, 2), (3, 4)]
    p.write_text("1,2\nx,y\n")
    with pytest.raises(InferenceError):
        read_allow_list(p)
    rec = prediction_record(5, CompositionScores({(0, 1): 0.25, (1, 0): 0.75}), ["a", "b"], ["x", "y"])
    assert rec["pairs"][0] == {"attribute": "b", "object": "x", "prob": 0.75}
    write_predictions(tmp_path / "p.jsonl", [rec])
    assert read_predictions(tmp_path / "p.jsonl") == [rec]
