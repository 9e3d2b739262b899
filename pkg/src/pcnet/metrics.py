"""Run records, inference diagnostics and their CSV / JSON / SVG exports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from . import network as pcn
from .kernel import l1_norm, singular_values

DEFAULT_STRIDE = 10
SETTLE_TOL = 0.05
N_PROBES = 10


@dataclass
class Snapshot:
    batch_index: int
    mean_abs_weight: list
    singular_values: list
    test_accuracy: Optional[float] = None
    train_accuracy: Optional[float] = None
    accuracy_trajectory: list = field(default_factory=list)  # [(iteration, fraction)]
    energy_iterations: list = field(default_factory=list)
    layer_energy: list = field(default_factory=list)  # layer_energy[n-1][k] is layer n at energy_iterations[k]
    probe_labels: list = field(default_factory=list)
    top_node_trajectory: list = field(default_factory=list)  # [(iteration, probes x top-width)]


@dataclass
class RunRecord:
    run_id: str
    config: dict
    series: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict, repr=False, compare=False)  # batch -> WeightSet, not exported

    def add(self, snap: Snapshot) -> None:
        if self.series and snap.batch_index <= self.series[-1].batch_index:
            raise ValueError(f"snapshot {snap.batch_index} is not after {self.series[-1].batch_index}")
        self.series.append(snap)

    @property
    def batch_indices(self) -> list:
        return [s.batch_index for s in self.series]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "series": [_jsonable(asdict(s)) for s in self.series],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        series = []
        for s in d["series"]:
            s = dict(s)
            s["accuracy_trajectory"] = [tuple(p) for p in s["accuracy_trajectory"]]
            s["top_node_trajectory"] = [(p[0], p[1]) for p in s["top_node_trajectory"]]
            series.append(Snapshot(**s))
        return cls(d["run_id"], d["config"], series)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


# -- inference diagnostics ---------------------------------------------------

class InferenceProbe:
    """Recorder for :func:`pcnet.network.run_inference`.

    Samples label accuracy at every ``stride`` iterations (t > 0), per-layer
    mean node energy at t = 0 and every ``stride`` iterations, and the
    top-layer values of the rows listed in ``probe_rows``. It only reads the
    state it is handed.
    """

    def __init__(self, labels=None, stride: int = DEFAULT_STRIDE, probe_rows=()):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.labels = None if labels is None else np.asarray(labels)
        self.stride = stride
        self.probe_rows = np.asarray(probe_rows, dtype=np.intp)
        self.accuracy: list = []
        self.energy_iterations: list = []
        self.layer_energy: list = []
        self.top_nodes: list = []

    def __call__(self, t: int, state: pcn.NetworkState, errors: pcn.ErrorSet) -> None:
        if t % self.stride:
            return
        report = pcn.energy(errors)
        self.energy_iterations.append(t)
        if not self.layer_energy:
            self.layer_energy = [[] for _ in report.per_layer]
        for series, value in zip(self.layer_energy, report.per_layer):
            series.append(value)
        if t == 0:
            return
        if self.labels is not None:
            correct = pcn.read_labels(state.mu[0]) == self.labels
            self.accuracy.append((t, float(correct.mean())))
        if self.probe_rows.size:
            self.top_nodes.append((t, state.mu[0][self.probe_rows].tolist()))


def record_accuracy_trajectory(weights, dataset, config, iters: Optional[int] = None,
                               stride: int = DEFAULT_STRIDE) -> list:
    """Accuracy at every ``stride`` iterations of a single inference pass."""
    probe = InferenceProbe(dataset.labels, stride)
    pcn.infer_labels(weights, dataset.images, config, iters, probe)
    return probe.accuracy


def record_layer_energy(weights, images, config, iters: Optional[int] = None,
                        stride: int = DEFAULT_STRIDE) -> tuple:
    """``(iterations, per_layer_series)`` of mean node energy during test inference."""
    probe = InferenceProbe(None, stride)
    pcn.infer_labels(weights, images, config, iters, probe)
    return probe.energy_iterations, probe.layer_energy


def snapshot_weights(weights: pcn.WeightSet) -> tuple:
    mean_abs = [l1_norm(t) / t.size for t in weights.theta]
    svs = [singular_values(t).tolist() for t in weights.theta]
    return mean_abs, svs


def settling_time(iterations, values, tol: float = SETTLE_TOL) -> int:
    """First sampled iteration after which the series stays within ``tol`` (relative) of its last value."""
    values = np.asarray(values, dtype=np.float64)
    iterations = list(iterations)
    if values.size == 0:
        raise ValueError("empty series")
    final = values[-1]
    inside = np.abs(values - final) <= tol * abs(final)
    k = len(values)
    while k > 0 and inside[k - 1]:
        k -= 1
    return iterations[k] if k < len(values) else iterations[-1]


def norm_slopes(record: RunRecord, start: Optional[int] = None) -> list:
    """Least-squares slope of mean |theta| against batch index, per layer.

    Only snapshots with ``batch_index >= start`` enter the fit.
    """
    snaps = [s for s in record.series if start is None or s.batch_index >= start]
    x = np.array([s.batch_index for s in snaps], dtype=np.float64)
    y = np.array([s.mean_abs_weight for s in snaps])
    if len(x) < 2:
        return [0.0] * (y.shape[1] if y.ndim == 2 else 0)
    return [float(np.polyfit(x, y[:, n], 1)[0]) for n in range(y.shape[1])]


def export_embeddings(weights, dataset, config, iters, path) -> Path:
    """Write label plus final top-layer values for every image (no projection)."""
    _, state = pcn.infer_labels(weights, dataset.images, config, iters)
    top = state.mu[0]
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"node_{i}" for i in range(top.shape[1])])
        for label, row in zip(dataset.labels, top):
            w.writerow([int(label)] + [_fmt(v) for v in row])
    return path


# -- file exports --------------------------------------------------------------

CSV_SCHEMAS = {
    "accuracy.csv": ["batch_index", "test_accuracy", "train_accuracy"],
    "accuracy_trajectory.csv": ["batch_index", "iteration", "accuracy"],
    "layer_energy.csv": ["batch_index", "iteration", "layer", "energy"],
    "weights.csv": ["batch_index", "layer", "mean_abs_weight"],
    "singular_values.csv": ["batch_index", "layer", "rank", "value"],
    "top_nodes.csv": ["batch_index", "iteration", "probe", "label", "values"],
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _open_for_write(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv_rows(record: RunRecord) -> dict:
    rows = {name: [] for name in CSV_SCHEMAS}
    for s in record.series:
        b = s.batch_index
        rows["accuracy.csv"].append([b, s.test_accuracy, s.train_accuracy])
        for it, acc in s.accuracy_trajectory:
            rows["accuracy_trajectory.csv"].append([b, it, acc])
        for n, series in enumerate(s.layer_energy, start=1):
            for it, e in zip(s.energy_iterations, series):
                rows["layer_energy.csv"].append([b, it, n, e])
        for n, m in enumerate(s.mean_abs_weight):
            rows["weights.csv"].append([b, n, m])
        for n, svs in enumerate(s.singular_values):
            for r, v in enumerate(svs):
                rows["singular_values.csv"].append([b, n, r, v])
        for it, block in s.top_node_trajectory:
            for p, values in enumerate(block):
                label = s.probe_labels[p] if p < len(s.probe_labels) else ""
                rows["top_nodes.csv"].append([b, it, p, label, " ".join(_fmt(v) for v in values)])
    return rows


def export_csv(record: RunRecord, directory) -> list:
    """One CSV per series kind; header row first, ``batch_index`` first column."""
    directory = Path(directory)
    written = []
    for name, rows in _csv_rows(record).items():
        path = directory / name
        with _open_for_write(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_SCHEMAS[name])
            for row in rows:
                w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
        written.append(path)
    return written


def _read_rows(path: Path) -> list:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            return [dict(zip(header, row)) for row in reader]
    except FileNotFoundError:
        raise FileNotFoundError(f"missing series file {path}") from None


def _num(s: str):
    return None if s == "" else float(s)


def read_csv(directory, run_id: str = "", config: Optional[dict] = None) -> RunRecord:
    """Rebuild a record from :func:`export_csv` output."""
    directory = Path(directory)
    snaps: dict = {}

    def snap(b):
        if b not in snaps:
            snaps[b] = Snapshot(b, [], [])
        return snaps[b]

    for r in _read_rows(directory / "accuracy.csv"):
        s = snap(int(r["batch_index"]))
        s.test_accuracy, s.train_accuracy = _num(r["test_accuracy"]), _num(r["train_accuracy"])
    for r in _read_rows(directory / "weights.csv"):
        snap(int(r["batch_index"])).mean_abs_weight.append(float(r["mean_abs_weight"]))
    for r in _read_rows(directory / "singular_values.csv"):
        s = snap(int(r["batch_index"]))
        layer = int(r["layer"])
        while len(s.singular_values) <= layer:
            s.singular_values.append([])
        s.singular_values[layer].append(float(r["value"]))
    for r in _read_rows(directory / "accuracy_trajectory.csv"):
        snap(int(r["batch_index"])).accuracy_trajectory.append((int(r["iteration"]), float(r["accuracy"])))
    for r in _read_rows(directory / "layer_energy.csv"):
        s = snap(int(r["batch_index"]))
        layer, it = int(r["layer"]), int(r["iteration"])
        while len(s.layer_energy) < layer:
            s.layer_energy.append([])
        if layer == 1:
            s.energy_iterations.append(it)
        s.layer_energy[layer - 1].append(float(r["energy"]))
    top = directory / "top_nodes.csv"
    if top.exists():
        for r in _read_rows(top):
            s = snap(int(r["batch_index"]))
            it, p = int(r["iteration"]), int(r["probe"])
            if not s.top_node_trajectory or s.top_node_trajectory[-1][0] != it:
                s.top_node_trajectory.append((it, []))
            s.top_node_trajectory[-1][1].append([float(v) for v in r["values"].split()])
            if r["label"] != "" and len(s.probe_labels) <= p:
                s.probe_labels.append(int(r["label"]))
    record = RunRecord(run_id, config or {})
    for b in sorted(snaps):
        record.add(snaps[b])
    return record


def export_json(record: RunRecord, path) -> Path:
    path = Path(path)
    with _open_for_write(path) as fh:
        json.dump(record.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_json(path) -> RunRecord:
    with open(path) as fh:
        return RunRecord.from_dict(json.load(fh))


# -- SVG line charts -----------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _nice_bounds(lo: float, hi: float) -> tuple:
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def emit_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 640, height: int = 400) -> Path:
    """Write a standalone SVG line chart, one ``<polyline>`` per named series.

    ``series`` maps a legend label to a sequence of ``(x, y)`` points. A series
    with a single point is drawn as a ``<circle>`` marker instead.
    """
    series = {k: [(float(x), float(y)) for x, y in v] for k, v in series.items()}
    if not series or not any(series.values()):
        raise ValueError("emit_plot needs at least one non-empty series")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = _nice_bounds(min(xs), max(xs))
    y0, y1 = _nice_bounds(min(ys), max(ys))
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}"/>'
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}"/></g>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<text class="tick" x="{sx(fx):.2f}" y="{top + ph + 16}" text-anchor="middle">{fx:.4g}</text>')
        out.append(f'<text class="tick" x="{left - 6}" y="{sy(fy) + 4:.2f}" text-anchor="end">{fy:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if len(pts) == 1:
            (x, y), = pts
            out.append(f'<circle class="series" data-label="{escape(name)}" cx="{sx(x):.2f}" cy="{sy(y):.2f}" '
                       f'r="3" fill="{color}"/>')
        elif pts:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline class="series" data-label="{escape(name)}" points="{coords}" '
                       f'fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 18 * i
        out.append(f'<g class="legend-entry"><line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
                   f'<text x="{left + pw + 35}" y="{ly}">{escape(name)}</text></g>')
    out.append("</svg>")
    path = Path(path)
    with _open_for_write(path) as fh:
        fh.write("\n".join(out) + "\n")
    return path
