"""CSV / JSON artifacts written by the harness, and loaders that read them back.

Floats are written with ``repr`` (shortest round-trip form), so every loader
recovers the exact values that were written.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .sampler import TrajectoryTrace

TRACE_COLUMNS = ("step", "t", "traj", "delta_norm", "score_norm", "active_count", "degenerate_flag")
INTERVENTION_COLUMNS = ("traj", "step", "kind", "id")


def _f(v) -> str:
    return repr(float(v))


def write_samples(path, traj_ids, samples) -> None:
    samples = np.asarray(samples)
    header = ["traj"] + [f"x_{j}" for j in range(samples.shape[1])]
    lines = [",".join(header)]
    for traj, row in zip(traj_ids, samples):
        lines.append(",".join([str(int(traj))] + [_f(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "traj":
        raise ValueError(f"{path}: not a samples file")
    body = rows[1:]
    dim = len(rows[0]) - 1
    traj = np.array([int(r[0]) for r in body], dtype=np.int64)
    pts = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), dim)
    return traj, pts


def write_trace(path, trace: TrajectoryTrace) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for step in range(trace.n_steps):
        t = _f(trace.times[step])
        for b, traj in enumerate(trace.traj_ids):
            lines.append(",".join((
                str(step), t, str(int(traj)),
                _f(trace.delta_norm[b, step]), _f(trace.score_norm[b, step]),
                str(int(trace.active_count[b, step])), str(int(trace.degenerate[b, step])),
            )))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path, interventions_path=None) -> TrajectoryTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header {header}")
        rows = list(reader)
    steps = np.array([int(r[0]) for r in rows], dtype=np.int64)
    trajs = np.array([int(r[2]) for r in rows], dtype=np.int64)
    n_steps = int(steps.max()) + 1 if rows else 0
    traj_ids = np.array(list(dict.fromkeys(trajs.tolist())), dtype=np.int64)
    col = {int(t): i for i, t in enumerate(traj_ids)}
    times = np.zeros(n_steps)
    trace = TrajectoryTrace.allocate(traj_ids, times, 0, False)
    for r, step, traj in zip(rows, steps, trajs):
        b = col[int(traj)]
        times[step] = float(r[1])
        trace.delta_norm[b, step] = float(r[3])
        trace.score_norm[b, step] = float(r[4])
        trace.active_count[b, step] = int(r[5])
        trace.degenerate[b, step] = r[6] == "1"
    if interventions_path is not None and Path(interventions_path).exists():
        trace.interventions = load_interventions(interventions_path)
    return trace


def write_interventions(path, trace: TrajectoryTrace) -> None:
    lines = [",".join(INTERVENTION_COLUMNS)]
    lines += [f"{traj},{step},{kind},{sid}" for traj, step, kind, sid in trace.interventions]
    Path(path).write_text("\n".join(lines) + "\n")


def load_interventions(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != INTERVENTION_COLUMNS:
            raise ValueError(f"{path}: unexpected interventions header {header}")
        return [(int(r[0]), int(r[1]), r[2], int(r[3])) for r in reader]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_rows(path, columns, rows) -> None:
    """Plain CSV of dict rows; floats via ``repr``."""
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return _f(v)
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        return "" if v is None else str(v)

    lines = [",".join(columns)]
    lines += [",".join(cell(row.get(c)) for c in columns) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
