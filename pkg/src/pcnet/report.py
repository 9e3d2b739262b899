"""Summaries and figures computed from a stored run directory."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RunRecord, _fmt, _open_for_write, emit_plot, norm_slopes, read_csv, settling_time  # noqa: E402


def _accuracy_points(record: RunRecord, attr: str = "test_accuracy") -> list:
    return [(s.batch_index, getattr(s, attr)) for s in record.series if getattr(s, attr) is not None]


def peak_and_final(record: RunRecord, attr: str = "test_accuracy") -> tuple:
    """``(peak_batch, peak, final_batch, final)``; the earliest batch wins ties for the peak."""
    pts = _accuracy_points(record, attr)
    if not pts:
        return None, None, None, None
    peak_batch, peak = max(pts, key=lambda p: (p[1], -p[0]))
    return peak_batch, peak, pts[-1][0], pts[-1][1]


def snapshot_at(record: RunRecord, batch_index: int):
    for s in record.series:
        if s.batch_index == batch_index:
            return s
    raise KeyError(f"no snapshot at batch {batch_index}")


def accuracy_settling(snap) -> Optional[int]:
    if not snap.accuracy_trajectory:
        return None
    its, accs = zip(*snap.accuracy_trajectory)
    return settling_time(its, accs)


def energy_settling(snap) -> list:
    return [settling_time(snap.energy_iterations, series) for series in snap.layer_energy]


def summarize(record: RunRecord, slope_start: Optional[float] = None) -> dict:
    """One summary row: peak and final accuracy, norm slopes and settling times.

    Norm slopes are fitted over batches ``>= slope_start``; by default from
    the peak-accuracy checkpoint on, or over the whole run without accuracies.
    """
    if not record.series:
        raise ValueError(f"run {record.run_id!r} has no snapshots")
    peak_batch, peak, final_batch, final = peak_and_final(record)
    _, train_peak, _, train_final = peak_and_final(record, "train_accuracy")
    start = (peak_batch or 0) if slope_start is None else slope_start
    row = {
        "run_id": record.run_id,
        "snapshots": len(record.series),
        "peak_batch": peak_batch,
        "peak_accuracy": peak,
        "final_batch": final_batch,
        "final_accuracy": final,
        "peak_train_accuracy": train_peak,
        "final_train_accuracy": train_final,
    }
    for n, slope in enumerate(norm_slopes(record, start)):
        row[f"norm_slope_{n}"] = slope
    peak_snap = snapshot_at(record, peak_batch) if peak_batch is not None else None
    for tag, snap in (("peak", peak_snap), ("final", record.series[-1])):
        row[f"accuracy_settle_{tag}"] = accuracy_settling(snap) if snap is not None else None
        if snap is not None and snap.layer_energy:
            for n, t in enumerate(energy_settling(snap), start=1):
                row[f"energy_settle_{tag}_layer_{n}"] = t
    return row


def write_summary(rows: list, path) -> Path:
    """CSV with the union of all row keys as header, in first-seen order."""
    header = []
    for row in rows:
        header.extend(k for k in row if k not in header)
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row.get(k)) for k in header])
    return path


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    return _fmt(v)


def render(series: dict, stem, title: str, xlabel: str, ylabel: str, logy: bool = False) -> list:
    """Write ``stem.svg`` (hand-built) and ``stem.png`` (matplotlib) for the same series."""
    stem = Path(stem)
    series = {k: v for k, v in series.items() if v}
    if not series:
        return []
    svg = emit_plot(series, stem.with_suffix(".svg"), title, xlabel, ylabel)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o" if len(pts) == 1 else None, label=name, linewidth=1.3)
    if logy and all(y > 0 for pts in series.values() for _, y in pts):
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    png = stem.with_suffix(".png")
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [svg, png]


def _pick_checkpoints(record: RunRecord, count: int = 5) -> list:
    snaps = [s for s in record.series if s.accuracy_trajectory]
    if len(snaps) <= count:
        return snaps
    step = (len(snaps) - 1) / (count - 1)
    return [snaps[round(i * step)] for i in range(count)]


def render_run(record: RunRecord, out_dir, extra: Optional[dict] = None) -> list:
    """All figure analogues for one run. ``extra`` maps other run ids to records for overlay."""
    out_dir = Path(out_dir)
    written = []
    runs = {record.run_id: record, **(extra or {})}
    acc = {}
    for rid, rec in runs.items():
        acc[f"{rid} test"] = _accuracy_points(rec)
        acc[f"{rid} train"] = _accuracy_points(rec, "train_accuracy")
    written += render(acc, out_dir / "accuracy", "Accuracy after full inference", "batch", "accuracy")

    traj = {f"batch {s.batch_index}": s.accuracy_trajectory for s in _pick_checkpoints(record)}
    written += render(traj, out_dir / "accuracy_trajectory", "Accuracy during inference", "iteration", "accuracy")

    peak_batch, _, _, _ = peak_and_final(record)
    chosen = []
    if peak_batch is not None:
        chosen.append(("peak", snapshot_at(record, peak_batch)))
    chosen.append(("final", record.series[-1]))
    energy = {}
    for tag, snap in chosen:
        for n, series in enumerate(snap.layer_energy, start=1):
            energy[f"{tag} b{snap.batch_index} layer {n}"] = list(zip(snap.energy_iterations, series))
    written += render(energy, out_dir / "layer_energy", "Energy per layer during inference", "iteration",
                      "mean energy per node", logy=True)

    norms = {}
    for n in range(len(record.series[0].mean_abs_weight)):
        norms[f"layer {n}"] = [(s.batch_index, s.mean_abs_weight[n]) for s in record.series]
    written += render(norms, out_dir / "weights", "Mean absolute weight", "batch", "mean |theta|")

    svs = {}
    for n in range(len(record.series[0].singular_values)):
        for r in range(3):
            pts = [(s.batch_index, s.singular_values[n][r]) for s in record.series if len(s.singular_values[n]) > r]
            svs[f"layer {n} sv{r}"] = pts
    written += render(svs, out_dir / "singular_values", "Leading singular values", "batch", "singular value")

    final = record.series[-1]
    if final.top_node_trajectory:
        label = final.probe_labels[0] if final.probe_labels else None
        nodes = {}
        for k in range(len(final.top_node_trajectory[0][1][0])):
            name = f"node {k}" + (" (label)" if k == label else "")
            nodes[name] = [(it, block[0][k]) for it, block in final.top_node_trajectory]
        written += render(nodes, out_dir / "top_nodes", f"Top-layer nodes, probe 0, batch {final.batch_index}",
                          "iteration", "node value")
    return written


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    return read_csv(run_dir, run_dir.name)
