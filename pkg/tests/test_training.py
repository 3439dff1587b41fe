import numpy as np
import pytest

from compnet.data import SyntheticWorldConfig, generate
from compnet.training import ConfigError, RunConfig, TrainedModel, evaluate, train

WORLD = SyntheticWorldConfig(train_size=300, test_size=120, min_occurrence=3, seed=2)
FAST = dict(feature_dim=8, epochs=2, batch_size=32, base_rate=0.05 / 32, dropout=0.0)


@pytest.fixture(scope="module")
def ds():
    return generate(WORLD)


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(baseline="nope")
    with pytest.raises(ConfigError):
        RunConfig(num_negatives=0)
    with pytest.raises(ConfigError):
        RunConfig(decay="linear")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epochz": 3})
    cfg = RunConfig(baseline="softmax_product")
    assert cfg.loss_settings().weights.composition == 0.0
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("baseline", ["compnet", "softmax_product", "composition_fc", "bce"])
def test_every_baseline_trains_and_evaluates(baseline, ds):
    tm = train(ds, RunConfig(baseline=baseline, **FAST))
    assert len(tm.history) == 2 and np.isfinite(tm.history[-1]["total"])
    r = evaluate(tm, ds, 3, 3)
    assert 0 <= r.object_p1 <= 1 and 0 <= r.attribute_p1 <= 1
    assert r.seen_map is not None
    if baseline == "composition_fc":
        assert r.unseen_map is None and r.num_unseen == 0
    else:
        assert r.unseen_map is not None
    assert all(0 <= v <= 1 for v in r.ap.values())


def test_training_reduces_loss(ds):
    tm = train(ds, RunConfig(**{**FAST, "epochs": 4}))
    assert tm.history[-1]["total"] < tm.history[0]["total"]


def test_training_is_deterministic(ds):
    a = train(ds, RunConfig(**FAST, seed=3))
    b = train(ds, RunConfig(**FAST, seed=3))
    assert a.history == b.history
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_trained_model_roundtrip(ds, tmp_path):
    tm = train(ds, RunConfig(baseline="composition_fc", **FAST))
    tm.save(tmp_path / "c.npz")
    back = TrainedModel.load(tmp_path / "c.npz")
    assert back.config == tm.config and back.seen_pairs == tm.seen_pairs
    assert back.history == tm.history
    assert back.fc.tobytes() == tm.fc.tobytes()
    assert evaluate(back, ds, 3, 3) == evaluate(tm, ds, 3, 3)


def test_divergence_is_reported(ds):
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            train(ds, RunConfig(**{**FAST, "base_rate": 1e6}))
