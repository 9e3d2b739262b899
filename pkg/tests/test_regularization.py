import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnet import network as pcn
from pcnet import regularization as reg
from pcnet.kernel import l1_norm
from pcnet.training import train_batch


def weights_from(theta, bias=None):
    bias = bias or [np.zeros(t.shape[1]) for t in theta]
    return pcn.WeightSet(list(theta), list(bias))


def random_weights(seed, sizes=(3, 5, 4)):
    rng = np.random.default_rng(seed)
    return weights_from([rng.normal(0, 0.05, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                        [rng.normal(0, 0.05, size=b) for b in sizes[1:]])


def test_capture_then_apply_is_identity():
    w = random_weights(0)
    policy = reg.capture_targets(w)
    out = reg.apply_policy(w, policy)
    for a, b in zip(w.theta, out.theta):
        np.testing.assert_allclose(a, b, rtol=1e-15, atol=0)


def test_default_init_target_is_half_normal_sum():
    _, w = pcn.init_network(pcn.NetworkConfig(batch_size=1, rng_seed=3))
    policy = reg.capture_targets(w)
    expected = 1000 * 0.05 * np.sqrt(2 / np.pi)
    assert policy.targets[0] == pytest.approx(expected, rel=0.10)


def test_zero_layer_cannot_be_captured():
    w = weights_from([np.ones((2, 3)), np.zeros((3, 2))])
    with pytest.raises(reg.DegenerateWeightsError) as info:
        reg.capture_targets(w)
    assert info.value.layer == 1


def test_zero_layer_cannot_be_rescaled():
    w = weights_from([np.ones((2, 3)), np.zeros((3, 2))])
    policy = reg.RegularizationPolicy(reg.L1_PRESERVE, targets=(6.0, 1.0))
    with pytest.raises(ZeroDivisionError, match="layer 1"):
        reg.apply_policy(w, policy)


def test_doubling_is_undone():
    w = random_weights(1)
    policy = reg.capture_targets(w)
    doubled = weights_from([2 * t for t in w.theta])
    out = reg.apply_policy(doubled, policy)
    for a, b in zip(w.theta, out.theta):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-15)


def test_cap_values():
    w = weights_from([np.array([[0.15, -0.2, 0.05]]), np.array([[0.3], [0.0], [-0.01]])])
    out = reg.apply_policy(w, reg.RegularizationPolicy(reg.CAP, cap_value=0.1))
    np.testing.assert_array_equal(out.theta[0], [[0.1, -0.1, 0.05]])
    np.testing.assert_array_equal(out.theta[1], [[0.1], [0.0], [-0.01]])


def test_cap_leaves_biases_by_default():
    w = weights_from([np.ones((1, 2)), np.ones((2, 1))], [np.full(2, 5.0), np.full(1, -5.0)])
    out = reg.apply_policy(w, reg.RegularizationPolicy(reg.CAP, cap_value=0.1))
    np.testing.assert_array_equal(out.bias[0], [5.0, 5.0])
    capped = reg.apply_policy(w, reg.RegularizationPolicy(reg.CAP, cap_value=0.1, cap_biases=True))
    np.testing.assert_array_equal(capped.bias[1], [-0.1])


def test_l1_leaves_biases():
    w = random_weights(2)
    policy = reg.capture_targets(w)
    out = reg.apply_policy(weights_from([3 * t for t in w.theta], w.bias), policy)
    for a, b in zip(w.bias, out.bias):
        assert a is b


def test_none_is_identity():
    w = random_weights(3)
    assert reg.apply_policy(w, reg.RegularizationPolicy()) is w


@pytest.mark.parametrize("kwargs", [
    dict(kind="l2"),
    dict(kind=reg.CAP, cap_value=0.0),
    dict(kind=reg.L1_PRESERVE, targets=(1.0, -2.0)),
])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        reg.RegularizationPolicy(**kwargs)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_l1_preserve_is_positive_rescaling(seed, scale):
    w = random_weights(seed)
    policy = reg.capture_targets(w)
    rng = np.random.default_rng(seed + 1)
    moved = weights_from([t * scale + rng.normal(0, 0.01, size=t.shape) for t in w.theta])
    out = reg.apply_policy(moved, policy)
    for before, after, target in zip(moved.theta, out.theta, policy.targets):
        assert l1_norm(after) == pytest.approx(target, rel=1e-9)
        np.testing.assert_array_equal(np.sign(after), np.sign(before))
        nz = before != 0
        ratios = after[nz] / before[nz]
        assert ratios.min() > 0
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    twice = reg.apply_policy(out, policy)
    for a, b in zip(out.theta, twice.theta):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_cap_idempotent_and_monotone(seed, cap):
    rng = np.random.default_rng(seed)
    w = weights_from([rng.normal(0, 0.5, size=(3, 4)), rng.normal(0, 0.5, size=(4, 2))])
    policy = reg.RegularizationPolicy(reg.CAP, cap_value=cap)
    once = reg.apply_policy(w, policy)
    twice = reg.apply_policy(once, policy)
    for before, after, again in zip(w.theta, once.theta, twice.theta):
        np.testing.assert_array_equal(after, again)
        assert np.all(np.abs(after) <= np.minimum(np.abs(before), cap))
        inside = np.abs(before) <= cap
        np.testing.assert_array_equal(after[inside], before[inside])


def test_train_batch_keeps_l1_targets():
    cfg = pcn.NetworkConfig(layer_sizes=(10, 6, 5, 16), batch_size=4, train_inference_iters=5, rng_seed=2)
    rng = np.random.default_rng(0)
    _, w = pcn.init_network(cfg, rng)
    policy = reg.capture_targets(w)
    images = rng.random((4, 16))
    labels = np.eye(10)[[1, 3, 5, 7]]
    for b in range(5):
        w = train_batch(w, images, labels, cfg, policy, rng, b)
        for t, target in zip(w.theta, policy.targets):
            assert l1_norm(t) == pytest.approx(target, rel=1e-9)
