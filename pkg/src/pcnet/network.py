"""Generative predictive coding network: state, errors, energy and gradients.

Layers are indexed top (0) to bottom (N-1). Node values use the row-vector
convention: ``mu[n]`` is ``batch x width[n]`` and ``theta[n]`` is
``width[n] x width[n+1]``, so layer ``n`` predicts layer ``n+1`` as
``f(mu[n] @ theta[n] + bias[n])``.

Energy is stored non-negative, ``E = 1/2 * sum(eps^T eps)``, and every
gradient returned here is already a descent direction (``-dE/dx``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import kernel
from .kernel import AdamState, ShapeError

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"
ACTIVATIONS = {
    "tanh": (kernel.tanh_map, kernel.tanh_deriv_map),
    "identity": (kernel.identity_map, kernel.identity_deriv_map),
}


class DivergenceError(ArithmeticError):
    """Non-finite node or weight values appeared during a run."""

    def __init__(self, message: str, batch_index: Optional[int] = None, iteration: Optional[int] = None):
        ctx = []
        if batch_index is not None:
            ctx.append(f"batch {batch_index}")
        if iteration is not None:
            ctx.append(f"iteration {iteration}")
        super().__init__(message + (f" at {', '.join(ctx)}" if ctx else ""))
        self.batch_index = batch_index
        self.iteration = iteration


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple = (10, 100, 300, 784)
    activation: str = "tanh"
    use_bias: bool = True
    node_lr: float = 0.025
    weight_lr: float = 1e-3
    train_inference_iters: int = 50
    test_inference_iters: int = 1000
    batch_size: int = 640
    mode: str = SUPERVISED
    node_init_mean: float = 0.5
    node_init_std: float = 0.05
    weight_init_std: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 3:
            raise ValueError("a network needs at least 3 layers")
        if min(self.layer_sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mode not in (SUPERVISED, UNSUPERVISED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.node_lr <= 0 or self.weight_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.train_inference_iters < 1 or self.test_inference_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.node_init_std < 0 or self.weight_init_std < 0:
            raise ValueError("standard deviations must be non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)


@dataclass(frozen=True)
class PrecisionConfig:
    """Per-layer error precisions. Held at the identity (1.0 everywhere)."""

    values: tuple = ()

    def of(self, layer: int) -> float:
        return self.values[layer] if self.values else 1.0


IDENTITY_PRECISION = PrecisionConfig()


@dataclass
class NetworkState:
    mu: list
    clamped: list

    def __post_init__(self):
        if len(self.mu) != len(self.clamped):
            raise ShapeError("one clamp flag is needed per layer")

    @property
    def batch_size(self) -> int:
        return self.mu[0].shape[0]

    def copy(self) -> "NetworkState":
        return NetworkState([m.copy() for m in self.mu], list(self.clamped))


@dataclass
class WeightSet:
    theta: list
    bias: list
    activation: str = "tanh"
    use_bias: bool = True
    theta_opt: list = field(default_factory=list)
    bias_opt: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.theta) != len(self.bias):
            raise ShapeError("theta and bias lists differ in length")
        for n, (t, b) in enumerate(zip(self.theta, self.bias)):
            if b.shape != (t.shape[1],):
                raise ShapeError(f"bias[{n}] has shape {b.shape}, expected ({t.shape[1]},)")

    @property
    def layer_sizes(self) -> tuple:
        return tuple([self.theta[0].shape[0]] + [t.shape[1] for t in self.theta])

    def copy(self) -> "WeightSet":
        return WeightSet(
            [t.copy() for t in self.theta],
            [b.copy() for b in self.bias],
            self.activation,
            self.use_bias,
            list(self.theta_opt),
            list(self.bias_opt),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.theta) and all(np.all(np.isfinite(b)) for b in self.bias)


@dataclass
class ErrorSet:
    """Prediction errors for layers 1..N-1.

    ``eps[0]`` is ``None`` since the top layer receives no prediction.
    ``gain[n]`` caches ``f'(mu[n] @ theta[n] + bias[n])`` for n = 0..N-2 so
    the gradient functions do not repeat the forward pass.
    """

    eps: list
    gain: list


@dataclass
class EnergyReport:
    per_layer: list  # entry n-1 is the mean per-node energy of layer n
    total: float


def init_network(config: NetworkConfig, rng: Optional[np.random.Generator] = None):
    """Draw a fresh state and weight set. Same seed, same result."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    theta, bias = [], []
    for top, bottom in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
        theta.append(rng.normal(0.0, config.weight_init_std, size=(top, bottom)))
        b = rng.normal(0.0, config.weight_init_std, size=bottom)
        bias.append(b if config.use_bias else np.zeros(bottom))
    weights = WeightSet(
        theta,
        bias,
        config.activation,
        config.use_bias,
        [AdamState.fresh(t, config.adam_beta1, config.adam_beta2, config.adam_epsilon) for t in theta],
        [AdamState.fresh(b, config.adam_beta1, config.adam_beta2, config.adam_epsilon) for b in bias],
    )
    state = init_state(config, config.batch_size, rng)
    return state, weights


def init_state(config: NetworkConfig, batch_size: int, rng: np.random.Generator, clamped=None) -> NetworkState:
    mu = [rng.normal(config.node_init_mean, config.node_init_std, size=(batch_size, w)) for w in config.layer_sizes]
    if clamped is None:
        clamped = [False] * config.n_layers
    return NetworkState(mu, list(clamped))


def _activation(weights: WeightSet):
    return ACTIVATIONS[weights.activation]


def predict_down(mu_n, theta_n, bias_n, activation: str = "tanh", use_bias: bool = True) -> np.ndarray:
    f, _ = ACTIVATIONS[activation]
    pre = kernel.mat_mul(mu_n, theta_n)
    if use_bias:
        bias_n = np.asarray(bias_n, dtype=np.float64)
        if bias_n.shape != (pre.shape[1],):
            raise ShapeError(f"bias of shape {bias_n.shape} does not fit prediction width {pre.shape[1]}")
        pre = pre + bias_n
    return f(pre)


def compute_errors(state: NetworkState, weights: WeightSet) -> ErrorSet:
    f, fprime = _activation(weights)
    eps: list = [None]
    gain: list = []
    for n, (theta_n, bias_n) in enumerate(zip(weights.theta, weights.bias)):
        pre = kernel.mat_mul(state.mu[n], theta_n)
        if weights.use_bias:
            pre += bias_n
        if weights.activation == "tanh":
            pred = np.tanh(pre)
            gain.append(1.0 - pred * pred)
        else:
            pred = f(pre)
            gain.append(fprime(pre))
        below = state.mu[n + 1]
        if below.shape != pred.shape:
            raise ShapeError(f"layer {n + 1} has shape {below.shape}, prediction has {pred.shape}")
        eps.append(below - pred)
    return ErrorSet(eps, gain)


def energy(errors: ErrorSet, precision: PrecisionConfig = IDENTITY_PRECISION) -> EnergyReport:
    per_layer = []
    total = 0.0
    for n, e in enumerate(errors.eps[1:], start=1):
        batch, width = e.shape
        layer_sum = 0.5 * precision.of(n) * float(np.einsum("ij,ij->", e, e))
        per_layer.append(layer_sum / (batch * width))
        total += layer_sum / batch
    return EnergyReport(per_layer, total)


def _check_errors(state: NetworkState, errors: ErrorSet) -> None:
    if len(errors.eps) != len(state.mu):
        raise ShapeError("error set does not match the network depth; recompute errors")
    for n in range(1, len(state.mu)):
        if errors.eps[n].shape != state.mu[n].shape:
            raise ShapeError(f"stale errors for layer {n}: {errors.eps[n].shape} vs {state.mu[n].shape}")


def node_gradients(state: NetworkState, weights: WeightSet, errors: ErrorSet,
                   precision: PrecisionConfig = IDENTITY_PRECISION) -> list:
    """Descent directions for every layer's nodes; zero for clamped layers."""
    _check_errors(state, errors)
    grads = []
    last = len(state.mu) - 1
    for n, mu_n in enumerate(state.mu):
        if state.clamped[n]:
            grads.append(np.zeros_like(mu_n))
            continue
        if n < last:
            g = (precision.of(n + 1) * errors.eps[n + 1] * errors.gain[n]) @ weights.theta[n].T
        else:
            g = np.zeros_like(mu_n)
        if n > 0:
            g = g - precision.of(n) * errors.eps[n]
        grads.append(g)
    return grads


def weight_gradients(state: NetworkState, weights: WeightSet, errors: ErrorSet,
                     precision: PrecisionConfig = IDENTITY_PRECISION) -> list:
    """Batch-averaged descent directions ``(d_theta, d_bias)`` per weight layer."""
    _check_errors(state, errors)
    batch = state.batch_size
    out = []
    for n in range(len(weights.theta)):
        delta = precision.of(n + 1) * errors.eps[n + 1] * errors.gain[n]
        d_theta = state.mu[n].T @ delta / batch
        d_bias = delta.mean(axis=0) if weights.use_bias else np.zeros(delta.shape[1])
        out.append((d_theta, d_bias))
    return out


def _apply_node_update(state: NetworkState, grads: list, node_lr: float) -> NetworkState:
    mu = [m if state.clamped[n] else m + node_lr * grads[n] for n, m in enumerate(state.mu)]
    return NetworkState(mu, list(state.clamped))


def inference_step(state: NetworkState, weights: WeightSet, node_lr: float,
                   precision: PrecisionConfig = IDENTITY_PRECISION) -> NetworkState:
    """One synchronous Euler update of all free layers."""
    errors = compute_errors(state, weights)
    return _apply_node_update(state, node_gradients(state, weights, errors, precision), node_lr)


Recorder = Callable[[int, NetworkState, ErrorSet], None]


def run_inference(state: NetworkState, weights: WeightSet, node_lr: float, iters: int,
                  recorder: Optional[Recorder] = None,
                  precision: PrecisionConfig = IDENTITY_PRECISION,
                  batch_index: Optional[int] = None) -> NetworkState:
    """Apply ``iters`` inference steps.

    The recorder, if given, is called as ``recorder(t, state, errors)`` for
    t = 0..iters, where ``state`` is the state after ``t`` steps and
    ``errors`` are that state's prediction errors.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    free = [n for n, c in enumerate(state.clamped) if not c]
    errors = compute_errors(state, weights)
    if recorder is not None:
        recorder(0, state, errors)
    for t in range(1, iters + 1):
        grads = node_gradients(state, weights, errors, precision)
        state = _apply_node_update(state, grads, node_lr)
        for n in free:
            if not np.isfinite(state.mu[n]).all():
                raise DivergenceError(f"non-finite node values in layer {n}", batch_index, t)
        errors = compute_errors(state, weights)
        if recorder is not None:
            recorder(t, state, errors)
    return state


def clamp_mask(config: NetworkConfig, training: bool) -> list:
    """Bottom always clamped; top clamped only in supervised training."""
    mask = [False] * config.n_layers
    mask[-1] = True
    if training and config.mode == SUPERVISED:
        mask[0] = True
    return mask


def presentation_state(config: NetworkConfig, images, labels, rng: np.random.Generator,
                       training: bool) -> NetworkState:
    """Fresh random free nodes with data clamped per mode."""
    images = kernel.as_matrix(images)
    if images.shape[1] != config.layer_sizes[-1]:
        raise ShapeError(f"images have width {images.shape[1]}, bottom layer has {config.layer_sizes[-1]}")
    mask = clamp_mask(config, training)
    state = init_state(config, images.shape[0], rng, mask)
    state.mu[-1] = images.copy()
    if mask[0]:
        if labels is None:
            raise ValueError("supervised training needs one-hot labels")
        labels = kernel.as_matrix(labels)
        if labels.shape != state.mu[0].shape:
            raise ShapeError(f"labels have shape {labels.shape}, top layer expects {state.mu[0].shape}")
        state.mu[0] = labels.copy()
    return state


def update_weights(state: NetworkState, weights: WeightSet, config: NetworkConfig,
                   precision: PrecisionConfig = IDENTITY_PRECISION) -> WeightSet:
    """One Adam step on every weight matrix and bias from the current errors."""
    errors = compute_errors(state, weights)
    grads = weight_gradients(state, weights, errors, precision)
    theta, bias, theta_opt, bias_opt = [], [], [], []
    for n, (d_theta, d_bias) in enumerate(grads):
        # Adam minimises, so it is fed dE/dtheta = -descent direction.
        t, ts = kernel.adam_step(weights.theta[n], -d_theta, weights.theta_opt[n], config.weight_lr)
        theta.append(t)
        theta_opt.append(ts)
        if weights.use_bias:
            b, bs = kernel.adam_step(weights.bias[n], -d_bias, weights.bias_opt[n], config.weight_lr)
        else:
            b, bs = weights.bias[n], weights.bias_opt[n]
        bias.append(b)
        bias_opt.append(bs)
    return replace(weights, theta=theta, bias=bias, theta_opt=theta_opt, bias_opt=bias_opt)


def read_labels(top: np.ndarray) -> np.ndarray:
    """Argmax over the top layer; ties resolve to the lowest index."""
    return np.argmax(top, axis=1)


def eval_rng(config: NetworkConfig) -> np.random.Generator:
    """Node-initialisation stream for test inference; fixed per seed."""
    return np.random.default_rng([config.rng_seed, 0xE7A1])


def infer_labels(weights: WeightSet, images, config: NetworkConfig, iters: Optional[int] = None,
                 recorder=None, rng: Optional[np.random.Generator] = None):
    """Clamp the images, let every other layer settle, read the top-layer argmax."""
    iters = config.test_inference_iters if iters is None else iters
    rng = eval_rng(config) if rng is None else rng
    state = presentation_state(config, images, None, rng, training=False)
    state = run_inference(state, weights, config.node_lr, iters, recorder)
    return read_labels(state.mu[0]), state
