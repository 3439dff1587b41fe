import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compnet import data
from compnet.data import (CompositionSpace, DataError, ImageSample, SyntheticWorldConfig,
                          corrupt_labels, generate, is_unseen_image, make_world, split_compositions)

SMALL = dict(train_size=400, test_size=150, min_occurrence=3, seed=5)


@pytest.fixture(scope="module")
def small():
    return generate(SyntheticWorldConfig(**SMALL))


def test_config_validation():
    with pytest.raises(DataError):
        SyntheticWorldConfig(drop_prob=1.5)
    with pytest.raises(DataError):
        SyntheticWorldConfig(unseen_ratio=0.0)
    with pytest.raises(DataError):
        SyntheticWorldConfig(noise=-1)
    with pytest.raises(DataError):
        SyntheticWorldConfig(context_flip=2.0)


def test_generation_is_deterministic(small):
    again = generate(SyntheticWorldConfig(**SMALL))
    assert again == small
    assert all(a.feature.tobytes() == b.feature.tobytes() for a, b in zip(small.samples, again.samples))


def test_partition_sizes_and_contract(small):
    train = small.partition("train")
    test = small.partition("test-seen", "test-unseen")
    assert len(train) == 400
    assert len(test) == 150
    unseen = small.space.unseen
    assert not any(is_unseen_image(s, unseen) for s in train)
    for s in test:
        assert (s.partition == "test-unseen") == is_unseen_image(s, unseen)
    assert all(s.attrs and s.objs for s in small.samples)


def test_split_is_disjoint_and_qualifying(small):
    seen, unseen = small.space.seen, small.space.unseen
    assert not set(seen) & set(unseen)
    assert all(c >= SMALL["min_occurrence"] for c in list(seen.values()) + list(unseen.values()))
    assert len(unseen) == int(np.floor(0.2 * (len(seen) + len(unseen)) + 0.5))


def test_noiseless_features_are_prototype_sums():
    cfg = SyntheticWorldConfig(noise=0.0, drop_prob=0.0, add_prob=0.0, **SMALL)
    ds = generate(cfg)
    world = make_world(cfg, np.random.default_rng(cfg.seed))
    for s in ds.samples[:50]:
        expected = world.object_prototypes[s.objs].sum(axis=0)
        expected = expected + sum(world.appearance(a, o) for a in s.attrs for o in s.objs)
        np.testing.assert_allclose(s.feature, expected, atol=1e-12)
        assert all(world.realizable[a, o] for a in s.attrs for o in s.objs)


def test_context_flip_inverts_attribute_per_group():
    cfg = SyntheticWorldConfig(context_flip=1.0, **SMALL)
    world = make_world(cfg, np.random.default_rng(0))
    np.testing.assert_allclose(world.appearance(0, 0), -world.attribute_prototypes[0])
    cfg = SyntheticWorldConfig(context_flip=0.0, **SMALL)
    world = make_world(cfg, np.random.default_rng(0))
    np.testing.assert_allclose(world.appearance(0, 0), world.attribute_prototypes[0])


def test_label_drop_rate():
    rng = np.random.default_rng(0)
    dropped = sum(corrupt_labels([3], 10, 0.2, 0.0, rng)[1] for _ in range(10_000))
    assert abs(dropped - 2000) <= 150


def test_label_add():
    rng = np.random.default_rng(1)
    labels, dropped, added = corrupt_labels([1, 2], 5, 0.0, 1.0, rng)
    assert dropped == 0 and set([1, 2]) <= set(labels) and len(labels) == 2 + added


def test_split_rounding_and_errors():
    counts = {(i, 0): 5 for i in range(10)}
    seen, unseen = split_compositions(counts, 0.3, seed=0)
    assert len(unseen) == 3 and len(seen) == 7
    with pytest.raises(DataError):
        split_compositions(counts, 0.01, seed=0)
    with pytest.raises(DataError):
        split_compositions({(0, 0): 5}, 0.5, seed=0)
    seen, unseen = split_compositions({**counts, (9, 9): 1}, 0.3, seed=0, min_occurrence=2)
    assert (9, 9) not in seen and (9, 9) not in unseen


def test_paper_scale_split_sizes():
    counts = {(i, 0): 100 for i in range(8904)}
    seen, unseen = split_compositions(counts, 0.2, seed=0)
    # round(0.2 * 8904) = round(1780.8)
    assert len(unseen) == 1781 and len(seen) == 8904 - 1781


@given(st.sets(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1),
       st.lists(st.integers(0, 4), min_size=1, max_size=3, unique=True),
       st.lists(st.integers(0, 4), min_size=1, max_size=3, unique=True))
def test_unseen_tagging_is_cartesian(unseen, attrs, objs):
    s = ImageSample(0, np.zeros(2), sorted(attrs), sorted(objs))
    assert is_unseen_image(s, unseen) == any((a, o) in unseen for a in attrs for o in objs)


def test_save_load_roundtrip(small, tmp_path):
    path = tmp_path / "d.jsonl"
    data.save(small, path)
    back = data.load(path)
    assert back == small
    assert back.meta["config"]["seed"] == SMALL["seed"]


def test_load_errors_name_the_line(small, tmp_path):
    path = tmp_path / "d.jsonl"
    data.save(small, path)
    lines = path.read_text().splitlines()
    trunc = tmp_path / "t.jsonl"
    trunc.write_text("\n".join(lines[:4] + [lines[4][: len(lines[4]) // 2]]) + "\n")
    with pytest.raises(DataError, match=r"t.jsonl:5"):
        data.load(trunc)
    rec = json.loads(lines[3])
    rec["attrs"] = [99]
    bad = tmp_path / "v.jsonl"
    bad.write_text("\n".join(lines[:3] + [json.dumps(rec)]) + "\n")
    with pytest.raises(DataError, match=r"v.jsonl:4: label outside"):
        data.load(bad)
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(DataError):
        data.load(tmp_path / "e.jsonl")
    (tmp_path / "h.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(DataError, match="h.jsonl:1"):
        data.load(tmp_path / "h.jsonl")


def test_infeasible_world():
    with pytest.raises(DataError):
        generate(SyntheticWorldConfig(num_attributes=1, num_objects=1, train_size=10, test_size=2,
                                      min_occurrence=1))


def test_arrays(small):
    X, Ya, Yo = small.arrays(small.samples[:3])
    assert X.shape == (3, 32) and Ya.shape == (3, 12) and Yo.shape == (3, 24)
    assert Ya[0, small.samples[0].attrs].all()


def test_space_mask():
    space = CompositionSpace(2, 2, {(0, 1): 4}, {(1, 0): 3})
    assert space.mask("seen").tolist() == [[False, True], [False, False]]
    assert space.split_of((1, 0)) == "unseen" and space.split_of((0, 0)) is None
