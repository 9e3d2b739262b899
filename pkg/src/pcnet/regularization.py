"""Weight-matrix stabilisers applied after every weight update.

Two schemes are supported: rescaling each matrix back to the L1 norm it had
at initialisation, and clamping every weight into ``[-cap, cap]``. Biases are
left alone unless ``cap_biases`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .kernel import l1_norm
from .network import WeightSet

NONE = "none"
L1_PRESERVE = "l1_preserve"
CAP = "cap"
KINDS = (NONE, L1_PRESERVE, CAP)


class DegenerateWeightsError(ZeroDivisionError):
    """A weight layer has zero L1 norm, so it cannot be rescaled."""

    def __init__(self, layer: int):
        super().__init__(f"weight layer {layer} has zero L1 norm")
        self.layer = layer


@dataclass(frozen=True)
class RegularizationPolicy:
    kind: str = NONE
    targets: Optional[tuple] = None
    cap_value: float = 0.1
    cap_biases: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularization kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == CAP and not self.cap_value > 0:
            raise ValueError("cap_value must be > 0")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(float(t) for t in self.targets))
            if self.kind == L1_PRESERVE and any(t <= 0 for t in self.targets):
                raise ValueError("L1 targets must all be > 0")


def capture_targets(weights: WeightSet) -> RegularizationPolicy:
    """Freeze each layer's current L1 norm as its target."""
    targets = []
    for n, theta in enumerate(weights.theta):
        norm = l1_norm(theta)
        if norm == 0.0:
            raise DegenerateWeightsError(n)
        targets.append(norm)
    return RegularizationPolicy(kind=L1_PRESERVE, targets=tuple(targets))


def resolve(policy: RegularizationPolicy, weights: WeightSet) -> RegularizationPolicy:
    """Fill in L1 targets from ``weights`` if the policy does not carry them yet."""
    if policy.kind == L1_PRESERVE and policy.targets is None:
        return replace(capture_targets(weights), cap_biases=policy.cap_biases)
    return policy


def preserve_l1(theta: np.ndarray, target: float, layer: int = 0) -> np.ndarray:
    norm = l1_norm(theta)
    if norm == 0.0:
        raise DegenerateWeightsError(layer)
    return theta * (target / norm)


def apply_policy(weights: WeightSet, policy: RegularizationPolicy) -> WeightSet:
    if policy.kind == NONE:
        return weights
    if policy.kind == L1_PRESERVE:
        if policy.targets is None:
            raise ValueError("l1_preserve policy has no targets; call capture_targets first")
        if len(policy.targets) != len(weights.theta):
            raise ValueError(f"{len(policy.targets)} targets for {len(weights.theta)} weight layers")
        theta = [preserve_l1(t, target, n) for n, (t, target) in enumerate(zip(weights.theta, policy.targets))]
        return replace(weights, theta=theta)
    c = policy.cap_value
    theta = [np.clip(t, -c, c) for t in weights.theta]
    bias = [np.clip(b, -c, c) for b in weights.bias] if policy.cap_biases else weights.bias
    return replace(weights, theta=theta, bias=bias)
