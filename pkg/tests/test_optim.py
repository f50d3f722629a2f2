import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covmeta import autodiff as ad
from covmeta.autodiff import Tape
from covmeta.optim import (AdamState, SgdConfig, adam_step, clip_by_global_norm, global_norm, sgd_step,
                           weight_decay_grad)


def test_sgd_hand_example():
    assert float(sgd_step(np.array(1.0), np.array(1.0), SgdConfig(0.1))) == pytest.approx(0.9, abs=1e-15)


def test_sgd_zero_grad_or_rate_is_identity():
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sgd_step(p, np.zeros(2), 0.3), p)
    np.testing.assert_array_equal(sgd_step(p, np.array([5.0, 7.0]), 0.0), p)


def test_sgd_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        sgd_step(np.zeros(2), np.zeros(3), 0.1)


def test_sgd_config_rejects_negative_rate():
    with pytest.raises(ValueError):
        SgdConfig(-0.1)


def test_sgd_step_is_differentiable_node():
    with Tape(higher_order=True) as t:
        lam = t.variable(2.0)
        (g,) = t.backward(ad.mul(ad.square(lam), 0.5), [lam])
        new = sgd_step(lam, g, 0.1)
        assert ad.is_node(new)
        (d,) = t.backward(new, [lam])
    assert float(ad.value_of(d)) == pytest.approx(0.9, abs=1e-15)


@given(st.floats(-10, 10), st.floats(0, 1), st.integers(0, 8))
def test_sgd_on_half_square_is_geometric(lam0, lr, k):
    lam = np.array(lam0)
    for _ in range(k):
        with Tape() as t:
            v = t.variable(lam)
            (g,) = t.backward(ad.mul(ad.square(v), 0.5), [v])
        lam = sgd_step(lam, g, lr)
    expect = lam0
    for _ in range(k):
        expect = expect - lr * expect
    assert float(lam) == expect
    # each update rounds at the scale of |lam|, so the closed form agrees absolutely, not relatively
    assert float(lam) == pytest.approx(lam0 * (1 - lr) ** k, rel=1e-12, abs=1e-14 * abs(lam0) + 1e-300)


def test_adam_first_step_closed_form():
    st0 = AdamState.zeros(1, 0.001)
    st1, p = adam_step(st0, np.array([2.0]), np.array([0.3]))
    assert p[0] == pytest.approx(2.0 - 0.001 / (1 + 1e-8 / 0.3), abs=1e-15)
    assert st1.step == 1 and st0.step == 0


def test_adam_zero_grad_first_step():
    _, p = adam_step(AdamState.zeros(2), np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_accumulators_start_at_zero():
    st0 = AdamState.zeros(3)
    assert st0.step == 0 and not st0.m.any() and not st0.v.any()


def test_adam_constant_grad_monotone():
    state, p = AdamState.zeros(1, 0.01), np.array([0.0])
    seen = [p[0]]
    for _ in range(3):
        state, p = adam_step(state, p, np.array([-4.0]))
        seen.append(p[0])
    assert all(b > a for a, b in zip(seen, seen[1:]))
    assert state.step == 3


@given(st.floats(-1e6, 1e6).filter(lambda g: abs(g) > 1e-6))
def test_adam_first_update_sign(g):
    _, p = adam_step(AdamState.zeros(1), np.array([0.0]), np.array([g]))
    assert math.copysign(1.0, p[0]) == -math.copysign(1.0, g)


def test_adam_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_optimizers_are_pure():
    st0 = AdamState.zeros(2)
    a = adam_step(st0, np.array([1.0, 2.0]), np.array([0.5, -0.5]))
    b = adam_step(st0, np.array([1.0, 2.0]), np.array([0.5, -0.5]))
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0].m, b[0].m) and np.array_equal(a[0].v, b[0].v)


def test_weight_decay_examples():
    np.testing.assert_array_equal(weight_decay_grad(np.array([1.0, -2.0]), 0.0), [0.0, 0.0])
    np.testing.assert_array_equal(weight_decay_grad(np.array([1.0, -2.0]), 0.5), [1.0, -2.0])
    np.testing.assert_array_equal(weight_decay_grad(np.zeros(3), 3.0), np.zeros(3))
    with pytest.raises(ValueError):
        weight_decay_grad(np.zeros(1), -1.0)


def test_global_norm_survives_huge_entries():
    v = np.array([1e200, 1e200])
    assert global_norm(v) == pytest.approx(math.sqrt(2) * 1e200)
    clipped, n = clip_by_global_norm(v, 10.0)
    assert np.linalg.norm(clipped) == pytest.approx(10.0)


def test_clip_leaves_short_vectors_and_disabled_clip_alone():
    v = np.array([3.0, 4.0])
    assert np.array_equal(clip_by_global_norm(v, 5.0)[0], v)
    assert np.array_equal(clip_by_global_norm(v * 100, 0.0)[0], v * 100)
