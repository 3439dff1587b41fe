import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compnet.numerics import (SGD, LrSchedule, NumericsError, clip_global_norm, grad_check,
                              leaky_relu, leaky_relu_grad, linear_op, log_sigmoid, log_softmax,
                              log_softmax_op, logsumexp, lr_at, make_leaky_relu_op, sgd_step,
                              sigmoid, softmax)

finite = st.floats(-50, 50, allow_nan=False)
vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


def test_leaky_relu_values():
    assert leaky_relu(2.0) == 2.0
    assert leaky_relu(-2.0) == pytest.approx(-0.2)
    assert leaky_relu_grad(0.0) == 1.0
    assert leaky_relu_grad(-1.0) == pytest.approx(0.1)
    with pytest.raises(NumericsError):
        leaky_relu(1.0, a=1.5)


@given(vectors)
def test_softmax_is_a_distribution(x):
    p = softmax(x)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


@given(vectors, finite)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax(x + c), softmax(x), atol=1e-12)


@given(vectors)
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(np.exp(log_softmax(x)), softmax(x), atol=1e-12)


def test_softmax_extremes_and_errors():
    p = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert p[0] == pytest.approx(1.0) and np.all(np.isfinite(p))
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0 + math.log(2))
    with pytest.raises(NumericsError):
        softmax(np.array([]))
    with pytest.raises(NumericsError):
        softmax(np.array([1.0, np.nan]))


@given(finite)
def test_sigmoid_and_log_sigmoid_agree(x):
    assert math.exp(float(log_sigmoid(x))) == pytest.approx(float(sigmoid(x)), rel=1e-12, abs=1e-300)
    assert float(sigmoid(x)) + float(sigmoid(-x)) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_linear_and_activations(seed):
    rng = np.random.default_rng(seed)
    point = {"W": rng.standard_normal((3, 4)), "b": rng.standard_normal(3),
             "x": rng.standard_normal((2, 4))}
    assert grad_check(linear_op, point, seed=seed) < 1e-6
    # keep points away from the kink at 0
    x = rng.standard_normal(7)
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    assert grad_check(make_leaky_relu_op(0.1), {"x": x}, seed=seed) < 1e-6
    assert grad_check(log_softmax_op, {"x": rng.standard_normal((2, 5))}, seed=seed,
                      dtype=np.longdouble) < 1e-6


def test_grad_check_flags_a_wrong_gradient():
    from compnet.numerics import DiffOp

    bad = DiffOp("square", lambda inp: (inp["x"] ** 2, inp["x"]), lambda x, g: {"x": 3 * x * g})
    assert grad_check(bad, {"x": np.array([1.0, -2.0])}) > 0.1


def test_sgd_momentum_matches_hand_computation():
    p = {"w": np.array([1.0, 2.0])}
    vel = {}
    sgd_step(p, {"w": np.array([0.5, -1.0])}, 0.1, momentum=0.9, velocity=vel)
    np.testing.assert_allclose(p["w"], [0.95, 2.1])
    sgd_step(p, {"w": np.array([0.5, -1.0])}, 0.1, momentum=0.9, velocity=vel)
    # v = 0.9 * g + g = 1.9 g
    np.testing.assert_allclose(p["w"], [0.95 - 0.095, 2.1 + 0.19])


def test_sgd_weight_decay_and_shape_check():
    p = {"w": np.array([2.0])}
    sgd_step(p, {"w": np.array([0.0])}, 0.5, weight_decay=0.1)
    np.testing.assert_allclose(p["w"], [1.9])
    with pytest.raises(NumericsError):
        sgd_step(p, {"w": np.zeros(2)}, 0.1)
    with pytest.raises(NumericsError):
        sgd_step(p, {"w": np.zeros(1)}, 0.1, momentum=0.9)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    opt = SGD(momentum=0.0, clip_norm=1.0)
    p = {"a": np.array([0.0])}
    opt.step(p, {"a": np.array([10.0])}, 1.0)
    np.testing.assert_allclose(p["a"], [-1.0])


def test_schedule_warmup_and_step_decay():
    s = LrSchedule(base_rate=0.1 / 256, batch_size=256, warmup_fraction=0.1, decay="step",
                   factor=0.5, num_steps=2)
    total = 100
    assert s.peak == pytest.approx(0.1)
    assert lr_at(s, 0, total) == 0.0
    assert lr_at(s, 5, total) == pytest.approx(0.05)
    assert lr_at(s, 10, total) == pytest.approx(0.1)
    # 90 post-warmup steps in 3 segments of 30
    assert lr_at(s, 39, total) == pytest.approx(0.1)
    assert lr_at(s, 40, total) == pytest.approx(0.05)
    assert lr_at(s, 99, total) == pytest.approx(0.025)
    with pytest.raises(NumericsError):
        lr_at(s, 100, total)


def test_schedule_cosine():
    s = LrSchedule(base_rate=1.0, batch_size=1, warmup_fraction=0.0, decay="cosine")
    assert lr_at(s, 0, 10) == pytest.approx(1.0)
    assert lr_at(s, 5, 10) == pytest.approx(0.5)


@given(st.integers(1, 500), st.floats(0.0, 0.5), st.sampled_from(["step", "cosine"]))
def test_schedule_bounded_by_peak(total, warm, decay):
    s = LrSchedule(base_rate=0.01, batch_size=10, warmup_fraction=warm, decay=decay)
    rates = [lr_at(s, i, total) for i in range(total)]
    assert all(0.0 <= r <= s.peak + 1e-15 for r in rates)


def test_schedule_validation():
    with pytest.raises(NumericsError):
        LrSchedule(warmup_fraction=1.0)
    with pytest.raises(NumericsError):
        LrSchedule(decay="linear")
    with pytest.raises(NumericsError):
        LrSchedule(factor=0.0)
