"""Run specifications: flat YAML config files, named presets and CLI overrides.

Resolution order, later wins: built-in defaults, ``preset``, config file, CLI flags.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from . import network as pcn
from . import regularization as reg
from .data import DATA_DIR_ENV
from .training import Schedule


class ConfigError(ValueError):
    """A config file or flag could not be turned into a valid :class:`RunSpec`."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class RunSpec:
    # network
    layer_sizes: tuple = (10, 100, 300, 784)
    activation: str = "tanh"
    use_bias: bool = True
    node_lr: float = 0.025
    weight_lr: float = 1e-3
    train_inference_iters: int = 50
    test_inference_iters: int = 1000
    batch_size: int = 640
    mode: str = pcn.SUPERVISED
    node_init_mean: float = 0.5
    node_init_std: float = 0.05
    weight_init_std: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    # regularisation
    policy: str = reg.NONE
    cap_value: float = 0.1
    cap_biases: bool = False
    # data
    data_dir: Optional[str] = None
    synthetic: bool = False
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    train_eval_subset: int = 0
    # schedule
    total_batches: int = 4000
    eval_every: int = 100
    stride: int = 10
    # output
    out_dir: str = "runs/run"
    run_id: str = "run"

    def network_config(self) -> pcn.NetworkConfig:
        names = {f.name for f in fields(pcn.NetworkConfig)} - {"rng_seed"}
        return pcn.NetworkConfig(rng_seed=self.seed, **{n: getattr(self, n) for n in names})

    def policy_spec(self) -> reg.RegularizationPolicy:
        return reg.RegularizationPolicy(self.policy, cap_value=self.cap_value, cap_biases=self.cap_biases)

    def schedule(self) -> Schedule:
        return Schedule(total_batches=self.total_batches, eval_every=self.eval_every,
                        test_size=self.test_subset, train_eval_size=self.train_eval_subset,
                        stride=self.stride)

    def resolved_data_dir(self) -> Optional[Path]:
        raw = self.data_dir or os.environ.get(DATA_DIR_ENV)
        return Path(raw) if raw else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d


FIELD_TYPES = {f.name: f.type for f in fields(RunSpec)}
KEYS = tuple(FIELD_TYPES)

# Desk-scale bundle: small hidden layers, small batches and a 5k-image MNIST subset.
_DESK = dict(layer_sizes=(10, 64, 128, 784), batch_size=16, total_batches=20000, eval_every=1000,
             test_subset=1000, train_eval_subset=1000)

PRESETS = {
    "fig2-baseline": dict(policy=reg.NONE, train_eval_subset=10000),
    "fig2-l1": dict(policy=reg.L1_PRESERVE),
    "fig2-cap": dict(policy=reg.CAP, cap_value=0.1),
    "fig3": dict(policy=reg.NONE, eval_every=500, stride=10),
    "fig5-supervised": dict(policy=reg.NONE, mode=pcn.SUPERVISED, test_subset=1000),
    "fig5-unsupervised": dict(policy=reg.NONE, mode=pcn.UNSUPERVISED, test_subset=0),
    "desk": dict(_DESK),
}


def _coerce(key: str, value):
    kind = FIELD_TYPES[key]
    if value is None:
        if kind.startswith("Optional"):
            return None
        raise ConfigError("may not be null", key)
    if key == "layer_sizes":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list of integers, got {value!r}", key)
        try:
            return tuple(_coerce_int(key, int(v) if isinstance(v, str) else v) for v in value)
        except ValueError:
            raise ConfigError(f"expected a list of integers, got {value!r}", key) from None
    if "bool" in kind:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected a boolean, got {value!r}", key)
    if "int" in kind:
        return _coerce_int(key, value)
    if "float" in kind:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", key)
    return value


def _coerce_int(key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", key)
    return value


def _merge(spec: RunSpec, values: dict, source: str) -> RunSpec:
    clean = {}
    for key, value in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key in {source}", key)
        clean[key] = _coerce(key, value)
    return replace(spec, **clean)


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path} must hold a flat key: value mapping")
    for key, value in loaded.items():
        if isinstance(value, dict):
            raise ConfigError("nested sections are not supported", str(key))
    return {str(k): v for k, v in loaded.items()}


def parse_config(path=None, overrides: Optional[dict] = None, preset: Optional[str] = None) -> RunSpec:
    """Resolve a :class:`RunSpec` from an optional file, preset and flag overrides.

    A ``preset`` key inside the file is honoured unless ``preset`` is passed.
    """
    file_values = read_config_file(path) if path is not None else {}
    preset = preset or file_values.pop("preset", None)
    file_values.pop("preset", None)
    spec = RunSpec()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}", "preset")
        spec = _merge(spec, PRESETS[preset], f"preset {preset}")
    spec = _merge(spec, file_values, str(path))
    spec = _merge(spec, {k: v for k, v in (overrides or {}).items() if v is not None}, "flags")
    validate(spec)
    return spec


def validate(spec: RunSpec) -> None:
    if spec.total_batches < 0:
        raise ConfigError("must be >= 0", "total_batches")
    if spec.eval_every < 1:
        raise ConfigError("must be >= 1", "eval_every")
    if spec.stride < 1:
        raise ConfigError("must be >= 1", "stride")
    for key in ("train_subset", "test_subset"):
        value = getattr(spec, key)
        if value is not None and value < 0:
            raise ConfigError("must be >= 0", key)
    try:
        spec.network_config()
        spec.policy_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not spec.synthetic and spec.resolved_data_dir() is None:
        raise ConfigError(f"no dataset: pass --data-dir, set {DATA_DIR_ENV} or use --synthetic", "data_dir")


def dump_config(spec: RunSpec, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    return path
