import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnet import kernel
from pcnet import network as pcn
from pcnet.kernel import AdamState

from oracles import central_difference, scalar_energy_sum


def random_net(rng, sizes, batch, activation="tanh", use_bias=True, scale=0.5, clamped=None):
    theta = [rng.normal(0, scale, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bias = [rng.normal(0, scale, size=b) if use_bias else np.zeros(b) for b in sizes[1:]]
    weights = pcn.WeightSet(theta, bias, activation, use_bias,
                            [AdamState.fresh(t) for t in theta], [AdamState.fresh(b) for b in bias])
    mu = [rng.normal(0.5, 0.5, size=(batch, w)) for w in sizes]
    return pcn.NetworkState(mu, list(clamped or [False] * len(sizes))), weights


def random_case(seed):
    rng = np.random.default_rng(seed)
    n_layers = int(rng.integers(3, 5))
    sizes = [int(s) for s in rng.integers(1, 9, size=n_layers)]
    batch = int(rng.integers(1, 4))
    activation = "tanh" if rng.random() < 0.8 else "identity"
    clamped = [bool(c) for c in rng.random(n_layers) < 0.3]
    return random_net(rng, sizes, batch, activation, bool(rng.random() < 0.8), clamped=clamped)


def energy_sum(state, weights):
    """B * energy().total, i.e. 1/2 * sum of squared errors over the batch."""
    return pcn.energy(pcn.compute_errors(state, weights)).total * state.batch_size


# -- initialisation ---------------------------------------------------------------

def test_init_is_deterministic():
    cfg = pcn.NetworkConfig(layer_sizes=(3, 4, 5), batch_size=2, rng_seed=11)
    s1, w1 = pcn.init_network(cfg)
    s2, w2 = pcn.init_network(cfg)
    for a, b in zip(s1.mu + w1.theta + w1.bias, s2.mu + w2.theta + w2.bias):
        np.testing.assert_array_equal(a, b)


def test_zero_node_std_gives_exact_mean():
    cfg = pcn.NetworkConfig(layer_sizes=(3, 4, 5), batch_size=2, node_init_std=0.0)
    state, _ = pcn.init_network(cfg)
    for m in state.mu:
        assert np.all(m == 0.5)


def test_default_weight_scale_is_half_normal_mean():
    closed_form = 0.05 * math.sqrt(2 / math.pi)
    assert closed_form == pytest.approx(0.0399, abs=1e-4)
    # sampling oracle over many independent draws of the same shape
    draws = [np.abs(np.random.default_rng(s).normal(0, 0.05, size=(10, 100))).mean() for s in range(200)]
    assert np.mean(draws) == pytest.approx(closed_form, rel=0.01)
    _, weights = pcn.init_network(pcn.NetworkConfig(batch_size=1))
    assert abs(np.abs(weights.theta[0]).mean() - closed_form) < 0.003


@pytest.mark.parametrize("bad", [
    dict(layer_sizes=(3, 4)),
    dict(layer_sizes=(3, 0, 4)),
    dict(node_lr=0.0),
    dict(weight_lr=-1.0),
    dict(test_inference_iters=0),
    dict(mode="semi"),
    dict(activation="relu"),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        pcn.NetworkConfig(**bad)


# -- predictions and errors --------------------------------------------------------

def test_predict_down_cases():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(2, 3))
    assert np.all(pcn.predict_down(mu, np.zeros((3, 4)), np.zeros(4)) == 0)
    bias = rng.normal(size=3)
    np.testing.assert_allclose(pcn.predict_down(mu, np.eye(3), bias, "identity"), mu + bias, rtol=1e-15)
    theta = rng.normal(size=(3, 3))
    expected = kernel.tanh_map(kernel.mat_mul(mu, theta) + bias)
    np.testing.assert_array_equal(pcn.predict_down(mu, theta, bias), expected)
    np.testing.assert_array_equal(pcn.predict_down(mu, theta, bias, use_bias=False),
                                  kernel.tanh_map(kernel.mat_mul(mu, theta)))
    with pytest.raises(kernel.ShapeError):
        pcn.predict_down(mu, theta, np.zeros(5))


def test_errors_vanish_at_prediction():
    state, weights = random_net(np.random.default_rng(1), [3, 4, 5], 2)
    for n in range(2):
        state.mu[n + 1] = pcn.predict_down(state.mu[n], weights.theta[n], weights.bias[n])
    errors = pcn.compute_errors(state, weights)
    assert errors.eps[0] is None
    for e in errors.eps[1:]:
        assert np.all(e == 0)


def test_errors_with_zero_weights_equal_nodes():
    state, weights = random_net(np.random.default_rng(2), [3, 4, 5], 2)
    weights.theta = [np.zeros_like(t) for t in weights.theta]
    weights.bias = [np.zeros_like(b) for b in weights.bias]
    errors = pcn.compute_errors(state, weights)
    for n in (1, 2):
        np.testing.assert_array_equal(errors.eps[n], state.mu[n])


def test_errors_match_recomputation():
    state, weights = random_net(np.random.default_rng(3), [2, 3, 4, 2], 3)
    errors = pcn.compute_errors(state, weights)
    for n in range(3):
        for r in range(3):
            for j in range(state.mu[n + 1].shape[1]):
                pre = weights.bias[n][j] + sum(state.mu[n][r, i] * weights.theta[n][i, j]
                                               for i in range(state.mu[n].shape[1]))
                assert errors.eps[n + 1][r, j] == pytest.approx(state.mu[n + 1][r, j] - math.tanh(pre), abs=1e-12)


# -- energy -------------------------------------------------------------------------

def test_energy_cases():
    zero = pcn.ErrorSet([None, np.zeros((2, 3)), np.zeros((2, 4))], [])
    assert pcn.energy(zero).per_layer == [0.0, 0.0]
    one = pcn.ErrorSet([None, np.ones((1, 2))], [])
    report = pcn.energy(one)
    assert report.per_layer == [0.5]
    assert report.total == pytest.approx(1.0)


def test_energy_matches_scalar_oracle():
    state, weights = random_net(np.random.default_rng(4), [3, 4, 5, 2], 3)
    report = pcn.energy(pcn.compute_errors(state, weights))
    expected = scalar_energy_sum(state.mu, weights.theta, weights.bias) / 3
    assert report.total == pytest.approx(expected, rel=1e-12)
    widths = [4, 5, 2]
    assert report.total == pytest.approx(sum(w * e for w, e in zip(widths, report.per_layer)), rel=1e-12)
    assert all(e >= 0 for e in report.per_layer)


# -- gradients --------------------------------------------------------------------

def test_clamped_layers_get_zero_gradient():
    state, weights = random_net(np.random.default_rng(5), [3, 4, 5], 2, clamped=[True, False, True])
    grads = pcn.node_gradients(state, weights, pcn.compute_errors(state, weights))
    assert np.all(grads[0] == 0) and np.all(grads[2] == 0)
    assert np.any(grads[1] != 0)


def test_zero_weight_gradients():
    state, weights = random_net(np.random.default_rng(6), [3, 4, 5], 2)
    weights.theta = [np.zeros_like(t) for t in weights.theta]
    errors = pcn.compute_errors(state, weights)
    grads = pcn.node_gradients(state, weights, errors)
    assert np.all(grads[0] == 0)
    np.testing.assert_array_equal(grads[1], -errors.eps[1])


def test_stale_errors_rejected():
    state, weights = random_net(np.random.default_rng(7), [3, 4, 5], 2)
    errors = pcn.compute_errors(state, weights)
    state.mu = [m[:1] for m in state.mu]
    with pytest.raises(kernel.ShapeError):
        pcn.node_gradients(state, weights, errors)


def check_node_gradients(state, weights, atol=1e-5):
    grads = pcn.node_gradients(state, weights, pcn.compute_errors(state, weights))
    worst = 0.0
    for n, mu_n in enumerate(state.mu):
        if state.clamped[n]:
            continue
        fd = central_difference(lambda: energy_sum(state, weights), mu_n)
        worst = max(worst, float(np.max(np.abs(grads[n] + fd))))
    assert worst <= atol
    return worst


def check_weight_gradients(state, weights, atol=1e-5):
    grads = pcn.weight_gradients(state, weights, pcn.compute_errors(state, weights))

    def total():
        return pcn.energy(pcn.compute_errors(state, weights)).total

    worst = 0.0
    for n, (d_theta, d_bias) in enumerate(grads):
        fd = central_difference(total, weights.theta[n])
        worst = max(worst, float(np.max(np.abs(d_theta + fd))))
        if weights.use_bias:
            fd = central_difference(total, weights.bias[n])
            worst = max(worst, float(np.max(np.abs(d_bias + fd))))
    assert worst <= atol
    return worst


def test_node_gradients_match_finite_differences():
    state, weights = random_net(np.random.default_rng(8), [3, 5, 4, 6], 2)
    check_node_gradients(state, weights)


def test_weight_gradients_match_finite_differences():
    state, weights = random_net(np.random.default_rng(9), [3, 5, 4, 6], 2)
    check_weight_gradients(state, weights)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_on_random_tiny_networks(seed):
    state, weights = random_case(seed)
    check_node_gradients(state, weights)
    check_weight_gradients(state, weights)


def test_weight_gradients_zero_for_zero_errors():
    state, weights = random_net(np.random.default_rng(10), [3, 4, 5], 2)
    for n in range(2):
        state.mu[n + 1] = pcn.predict_down(state.mu[n], weights.theta[n], weights.bias[n])
    for d_theta, d_bias in pcn.weight_gradients(state, weights, pcn.compute_errors(state, weights)):
        assert np.all(d_theta == 0) and np.all(d_bias == 0)


def test_weight_gradients_batch_average():
    single, weights = random_net(np.random.default_rng(11), [3, 4, 5], 1)
    tiled = pcn.NetworkState([np.repeat(m, 4, axis=0) for m in single.mu], single.clamped)
    one = pcn.weight_gradients(single, weights, pcn.compute_errors(single, weights))
    many = pcn.weight_gradients(tiled, weights, pcn.compute_errors(tiled, weights))
    for (a, b), (c, d) in zip(one, many):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b, d, rtol=1e-12, atol=1e-15)


# -- inference --------------------------------------------------------------------

def test_equilibrium_is_fixed_point():
    state, weights = random_net(np.random.default_rng(12), [3, 4, 5], 2, clamped=[True, False, False])
    for n in range(2):
        state.mu[n + 1] = pcn.predict_down(state.mu[n], weights.theta[n], weights.bias[n])
    after = pcn.inference_step(state, weights, 0.1)
    for a, b in zip(state.mu, after.mu):
        np.testing.assert_array_equal(a, b)


def test_single_free_node_decays():
    theta = [np.zeros((1, 1)), np.zeros((1, 1))]
    bias = [np.zeros(1), np.zeros(1)]
    weights = pcn.WeightSet(theta, bias, "tanh", False)
    state = pcn.NetworkState([np.array([[0.3]]), np.array([[0.8]]), np.array([[0.2]])], [True, False, True])
    after = pcn.inference_step(state, weights, 0.1)
    assert after.mu[1][0, 0] == pytest.approx(0.8 - 0.1 * 0.8, rel=1e-15)
    assert after.mu[0][0, 0] == 0.3 and after.mu[2][0, 0] == 0.2


def test_inference_step_descends_energy():
    for seed in range(100):
        state, weights = random_case(seed)
        before = energy_sum(state, weights)
        after = energy_sum(pcn.inference_step(state, weights, 1e-3), weights)
        assert after <= before + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_energy_non_increasing_and_clamps_respected(seed):
    state, weights = random_case(seed)
    original = state.copy()
    energies = []
    pcn.run_inference(state, weights, 1e-3, 50, lambda t, s, e: energies.append(pcn.energy(e).total))
    assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))
    final = pcn.run_inference(state, weights, 1e-3, 50)
    for n, c in enumerate(state.clamped):
        if c:
            np.testing.assert_array_equal(final.mu[n], original.mu[n])


def test_run_inference_zero_iterations():
    state, weights = random_case(13)
    out = pcn.run_inference(state, weights, 0.1, 0)
    for a, b in zip(state.mu, out.mu):
        np.testing.assert_array_equal(a, b)


def test_linear_two_layer_converges_to_least_squares():
    rng = np.random.default_rng(14)
    theta = rng.normal(size=(3, 6))
    bias = rng.normal(size=6)
    x = rng.normal(size=(2, 6))
    weights = pcn.WeightSet([theta], [bias], "identity", True)
    state = pcn.NetworkState([rng.normal(size=(2, 3)), x], [False, True])
    target = np.linalg.lstsq(theta.T, (x - bias).T, rcond=None)[0].T
    residuals = []
    pcn.run_inference(state, weights, 0.02, 3000,
                      lambda t, s, e: residuals.append(np.linalg.norm(s.mu[0] - target)))
    assert all(b <= a + 1e-13 for a, b in zip(residuals, residuals[1:]))
    assert residuals[-1] < 1e-8


def test_divergence_is_reported():
    theta = [np.full((2, 2), 50.0), np.full((2, 2), 50.0)]
    weights = pcn.WeightSet(theta, [np.zeros(2), np.zeros(2)], "identity", False)
    state = pcn.NetworkState([np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2))], [False, False, True])
    with np.errstate(all="ignore"), pytest.raises(pcn.DivergenceError) as info:
        pcn.run_inference(state, weights, 1.0, 500, batch_index=7)
    assert info.value.batch_index == 7 and info.value.iteration is not None
    assert "batch 7" in str(info.value)


# -- readout --------------------------------------------------------------------------

def test_read_labels_one_hot_and_ties():
    top = np.array([[0, 0, 1.0, 0], [0.5, 0.5, 0.2, 0.5], [0.1, 0.9, 0.9, 0]])
    np.testing.assert_array_equal(pcn.read_labels(top), [2, 0, 1])


def test_clamp_masks():
    sup = pcn.NetworkConfig(layer_sizes=(2, 3, 4))
    unsup = pcn.NetworkConfig(layer_sizes=(2, 3, 4), mode="unsupervised")
    assert pcn.clamp_mask(sup, training=True) == [True, False, True]
    assert pcn.clamp_mask(sup, training=False) == [False, False, True]
    assert pcn.clamp_mask(unsup, training=True) == pcn.clamp_mask(unsup, training=False)


def test_presentation_needs_labels_when_supervised():
    cfg = pcn.NetworkConfig(layer_sizes=(2, 3, 4))
    with pytest.raises(ValueError):
        pcn.presentation_state(cfg, np.zeros((1, 4)), None, np.random.default_rng(0), training=True)
