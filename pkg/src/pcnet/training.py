"""EM training: settle nodes with weights frozen, then one weight step per batch."""
from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import network as pcn
from .data import BatchPlan, Dataset, batch_stream
from .metrics import N_PROBES, InferenceProbe, RunRecord, Snapshot, snapshot_weights
from .regularization import RegularizationPolicy, apply_policy, resolve

log = logging.getLogger(__name__)


def train_batch(weights: pcn.WeightSet, images, labels, config: pcn.NetworkConfig,
                policy: RegularizationPolicy, rng: np.random.Generator,
                batch_index: Optional[int] = None) -> pcn.WeightSet:
    """Present one batch: clamp, settle for ``train_inference_iters``, update, regularise.

    ``labels`` (one-hot) are required in supervised mode and ignored otherwise.
    The input ``weights`` object is not modified.
    """
    if config.mode == pcn.SUPERVISED and labels is None:
        raise ValueError("supervised training needs labels")
    state = pcn.presentation_state(config, images, labels, rng, training=True)
    state = pcn.run_inference(state, weights, config.node_lr, config.train_inference_iters,
                              batch_index=batch_index)
    new = pcn.update_weights(state, weights, config)
    new = apply_policy(new, policy)
    if not new.is_finite():
        raise pcn.DivergenceError("non-finite weights after update", batch_index)
    return new


@dataclass(frozen=True)
class Schedule:
    """When and how to evaluate during :func:`train_run`.

    ``test_size`` / ``train_eval_size`` cap the number of images used for
    evaluation (``None`` means all; 0 disables that evaluation).
    """

    total_batches: int = 4000
    eval_every: int = 100
    test_size: Optional[int] = None
    train_eval_size: Optional[int] = 0
    stride: int = 10
    n_probes: int = N_PROBES
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.total_batches < 0:
            raise ValueError("total_batches must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def points(self) -> list:
        pts = list(range(0, self.total_batches + 1, self.eval_every))
        if pts[-1] != self.total_batches:
            pts.append(self.total_batches)
        return pts


def probe_rows(n_images: int, seed: int, count: int = N_PROBES) -> np.ndarray:
    count = min(count, n_images)
    return np.sort(np.random.default_rng([seed, 0x9B0B]).choice(n_images, size=count, replace=False))


def evaluate(weights: pcn.WeightSet, config: pcn.NetworkConfig, batch_index: int,
             test_set: Optional[Dataset], train_set: Optional[Dataset], schedule: Schedule) -> Snapshot:
    mean_abs, svs = snapshot_weights(weights)
    snap = Snapshot(batch_index, mean_abs, svs)
    if test_set is not None and len(test_set):
        rows = probe_rows(len(test_set), config.rng_seed, schedule.n_probes)
        probe = InferenceProbe(test_set.labels, schedule.stride, rows)
        pcn.infer_labels(weights, test_set.images, config, config.test_inference_iters, probe)
        snap.accuracy_trajectory = probe.accuracy
        snap.test_accuracy = _final_accuracy(weights, test_set, config, probe)
        snap.energy_iterations = probe.energy_iterations
        snap.layer_energy = probe.layer_energy
        snap.probe_labels = [int(v) for v in test_set.labels[rows]]
        snap.top_node_trajectory = probe.top_nodes
    if train_set is not None and len(train_set):
        predicted, _ = pcn.infer_labels(weights, train_set.images, config, config.test_inference_iters)
        snap.train_accuracy = float((predicted == train_set.labels).mean())
    return snap


def _final_accuracy(weights, dataset, config, probe: InferenceProbe) -> float:
    if probe.accuracy and probe.accuracy[-1][0] == config.test_inference_iters:
        return probe.accuracy[-1][1]
    predicted, _ = pcn.infer_labels(weights, dataset.images, config, config.test_inference_iters)
    return float((predicted == dataset.labels).mean())


def _subset(dataset: Optional[Dataset], size: Optional[int]) -> Optional[Dataset]:
    if dataset is None or size == 0:
        return None
    return dataset.subset(size)


def train_run(config: pcn.NetworkConfig, train_set: Dataset, test_set: Optional[Dataset],
              policy: RegularizationPolicy, schedule: Schedule, run_id: str = "run",
              on_snapshot: Optional[Callable[[Snapshot], None]] = None) -> RunRecord:
    """Train for ``schedule.total_batches`` batches, evaluating at every scheduled point.

    Everything random is derived from ``config.rng_seed``: weight init and
    training node draws share one stream, batch order uses its own, and test
    inference uses :func:`pcnet.network.eval_rng`.
    """
    rng = np.random.default_rng(config.rng_seed)
    _, weights = pcn.init_network(config, rng)
    policy = resolve(policy, weights)
    weights = apply_policy(weights, policy)
    test_eval = _subset(test_set, schedule.test_size)
    train_eval = _subset(train_set, schedule.train_eval_size)

    record = RunRecord(run_id, {"network": asdict(config), "policy": asdict(policy),
                                "schedule": asdict(schedule)})
    stream = batch_stream(train_set, BatchPlan(config.rng_seed, min(config.batch_size, len(train_set))))
    points = set(schedule.points())
    for b in range(schedule.total_batches + 1):
        if b in points:
            snap = evaluate(weights, config, b, test_eval, train_eval, schedule)
            record.add(snap)
            if schedule.keep_checkpoints:
                record.checkpoints[b] = weights.copy()
            log.info("batch %d test_acc=%s train_acc=%s mean|theta|=%s", b, snap.test_accuracy,
                     snap.train_accuracy, ["%.4f" % m for m in snap.mean_abs_weight])
            if on_snapshot is not None:
                on_snapshot(snap)
        if b == schedule.total_batches:
            break
        images, labels, _ = next(stream)
        try:
            weights = train_batch(weights, images, labels, config, policy, rng, batch_index=b)
        except pcn.DivergenceError as exc:
            raise pcn.DivergenceError(f"{run_id}: {exc}", b) from exc
    record.final_weights = weights
    return record


def with_seed(config: pcn.NetworkConfig, seed: int) -> pcn.NetworkConfig:
    return replace(config, rng_seed=seed)


class CheckpointError(ValueError):
    """A weights checkpoint is missing pieces or cannot be read."""


def save_checkpoint(weights: pcn.WeightSet, config: pcn.NetworkConfig, path) -> Path:
    """Store weights, biases and the network config in one ``.npz`` file."""
    path = Path(path)
    arrays = {f"theta_{n}": t for n, t in enumerate(weights.theta)}
    arrays.update({f"bias_{n}": b for n, b in enumerate(weights.bias)})
    arrays["config"] = np.array(json.dumps(asdict(config), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple:
    """Inverse of :func:`save_checkpoint`; returns ``(weights, config)``."""
    path = Path(path)
    try:
        npz = np.load(path, allow_pickle=False)
        if not isinstance(npz, np.lib.npyio.NpzFile):
            raise CheckpointError(f"{path} is a bare array, not a checkpoint archive")
        with npz:
            config = json.loads(str(npz["config"]))
            config = pcn.NetworkConfig(**config)
            n = len(config.layer_sizes) - 1
            theta = [np.array(npz[f"theta_{i}"], dtype=np.float64) for i in range(n)]
            bias = [np.array(npz[f"bias_{i}"], dtype=np.float64) for i in range(n)]
    except FileNotFoundError:
        raise
    except (OSError, ValueError, KeyError, TypeError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path} is not a valid checkpoint: {exc}") from exc
    weights = pcn.WeightSet(theta, bias, config.activation, config.use_bias)
    if weights.layer_sizes != config.layer_sizes:
        raise CheckpointError(f"{path}: weight shapes {weights.layer_sizes} disagree with config {config.layer_sizes}")
    return weights, config
