"""Euler-Maruyama reverse-SDE sampling with sparse repellency.

Each step evaluates the (optionally guided) score and its Tweedie estimate
``x_hat`` for the whole batch, computes every member's repellency shift from the
frozen snapshot of all ``x_hat`` values, then moves the batch. The last step
lands on the corrected ``x_hat`` itself with no noise, which is what makes the
shield guarantee exact at ``t = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .guidance import ShieldSet, SpellConfig, combine, delta_intra_batch, delta_static_batch, to_score_space
from .mixture import GaussianMixture, guided_score
from .schedule import NoiseSchedule, TimeGrid, alpha_sigma, drift_diffusion
from .shield_index import IvfIndex, candidate_rows


class NumericalError(ArithmeticError):
    def __init__(self, step: int, trajectories):
        trajectories = [int(b) for b in trajectories]
        super().__init__(f"non-finite state at step {step} for trajectories {trajectories[:8]}")
        self.step = step
        self.trajectories = trajectories


@dataclass
class StaticShields:
    """Static shield source: the full set, plus an optional IVF index over it."""

    shields: ShieldSet
    index: Optional[IvfIndex] = None
    n_probe: int = 2

    def __len__(self) -> int:
        return len(self.shields)


@dataclass
class BatchState:
    states: np.ndarray
    t: float
    step_index: int
    streams: list
    traj_ids: np.ndarray


@dataclass
class StepRecord:
    delta_norm: np.ndarray
    score_norm: np.ndarray
    active_count: np.ndarray
    degenerate: np.ndarray
    static_hits: list
    peer_hits: list
    x_hat: Optional[np.ndarray] = None


@dataclass
class TrajectoryTrace:
    """Per-(trajectory, step) records; arrays are shaped ``(B, n_steps)``."""

    traj_ids: np.ndarray
    times: np.ndarray
    delta_norm: np.ndarray
    score_norm: np.ndarray
    active_count: np.ndarray
    degenerate: np.ndarray
    interventions: list = field(default_factory=list)  # (traj, step, kind, id)
    x_hat: Optional[np.ndarray] = None

    @classmethod
    def allocate(cls, traj_ids, times, dim: int, snapshots: bool) -> "TrajectoryTrace":
        b, n = len(traj_ids), len(times)
        return cls(
            traj_ids=np.asarray(traj_ids, dtype=np.int64),
            times=np.asarray(times, dtype=float),
            delta_norm=np.zeros((b, n)),
            score_norm=np.zeros((b, n)),
            active_count=np.zeros((b, n), dtype=np.int64),
            degenerate=np.zeros((b, n), dtype=bool),
            x_hat=np.zeros((b, n, dim)) if snapshots else None,
        )

    def record(self, step: int, rec: StepRecord) -> None:
        self.delta_norm[:, step] = rec.delta_norm
        self.score_norm[:, step] = rec.score_norm
        self.active_count[:, step] = rec.active_count
        self.degenerate[:, step] = rec.degenerate
        if self.x_hat is not None and rec.x_hat is not None:
            self.x_hat[:, step] = rec.x_hat
        for b, traj in enumerate(self.traj_ids):
            for sid in rec.static_hits[b]:
                self.interventions.append((int(traj), step, "shield", int(sid)))
            for peer in rec.peer_hits[b]:
                self.interventions.append((int(traj), step, "peer", int(peer)))

    @property
    def n_trajectories(self) -> int:
        return self.traj_ids.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    def ever_active(self) -> np.ndarray:
        return (self.delta_norm > 0).any(axis=1)

    @classmethod
    def concatenate(cls, traces) -> "TrajectoryTrace":
        traces = list(traces)
        first = traces[0]
        snaps = None
        if all(t.x_hat is not None for t in traces):
            snaps = np.concatenate([t.x_hat for t in traces])
        return cls(
            traj_ids=np.concatenate([t.traj_ids for t in traces]),
            times=first.times,
            delta_norm=np.concatenate([t.delta_norm for t in traces]),
            score_norm=np.concatenate([t.score_norm for t in traces]),
            active_count=np.concatenate([t.active_count for t in traces]),
            degenerate=np.concatenate([t.degenerate for t in traces]),
            interventions=[rec for t in traces for rec in t.interventions],
            x_hat=snaps,
        )


@dataclass
class RunResult:
    samples: np.ndarray
    trace: TrajectoryTrace
    violations: int
    seed: int
    traj_ids: np.ndarray


@dataclass
class RunConfig:
    """Everything ``generate`` needs for one batch."""

    mixture: GaussianMixture
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    n_steps: int = 50
    batch_size: int = 1
    seed: int = 0
    spell: SpellConfig = field(default_factory=lambda: SpellConfig(radius=0.0))
    shields: Optional[StaticShields] = None
    label: Optional[object] = None
    gamma: float = 1.0
    trajectory_offset: int = 0
    snapshots: bool = False


def _static_terms(x_hat, source: StaticShields, spell: SpellConfig, direction):
    b, d = x_hat.shape
    r = spell.radius
    if source.index is None:
        delta, active, degenerate = delta_static_batch(x_hat, source.shields.centers, r, direction)
        hits = [np.flatnonzero(row) for row in active]
        return delta, hits, degenerate
    delta = np.zeros((b, d))
    degenerate = np.zeros(b, dtype=bool)
    hits = []
    centers = source.shields.centers
    for i, ids in enumerate(candidate_rows(source.index, x_hat, r, source.n_probe)):
        ids = np.sort(ids)
        if ids.size == 0:
            hits.append(ids)
            continue
        d_i, act, deg = delta_static_batch(x_hat[i:i + 1], centers[ids], r, direction)
        delta[i] = d_i[0]
        degenerate[i] = deg[0]
        hits.append(ids[act[0]])
    return delta, hits, degenerate


def backward_step(state: BatchState, grid: TimeGrid, schedule: NoiseSchedule, mixture: GaussianMixture,
                  spell: SpellConfig, shields: Optional[StaticShields] = None, label=None,
                  gamma: float = 1.0, snapshots: bool = False) -> tuple[BatchState, StepRecord]:
    """One step from ``grid.times[i]`` to ``grid.times[i + 1]``."""
    i = state.step_index
    t = state.t
    t_next = 1.0 - (i + 1) / grid.n_steps
    if not t > 0:
        raise ValueError("cannot step past t = 0")
    x = state.states
    b, d = x.shape
    h = t - t_next

    ev = guided_score(mixture, schedule, t, x, label=label, gamma=gamma)
    s, x_hat = ev.score, ev.denoised
    direction = spell.direction(d)

    zeros = np.zeros((b, d))
    static_delta, batch_delta = zeros, zeros
    static_hits = [np.zeros(0, np.int64)] * b
    peer_hits = [np.zeros(0, np.int64)] * b
    degenerate = np.zeros(b, dtype=bool)
    if spell.uses_static and shields is not None and len(shields):
        static_delta, static_hits, deg = _static_terms(x_hat, shields, spell, direction)
        degenerate |= deg
    if spell.uses_batch and b > 1:
        batch_delta, peer_active, deg = delta_intra_batch(x_hat, spell.radius, direction)
        degenerate |= deg
        peer_hits = [state.traj_ids[np.flatnonzero(row)] for row in peer_active]
    delta = combine(static_delta, batch_delta, spell)

    moved = np.any(delta != 0.0, axis=1)
    s_c, x_hat_c = s, x_hat
    if moved.any():
        alpha, sigma = alpha_sigma(schedule, t)
        s_c, x_hat_c = s.copy(), x_hat.copy()
        if spell.correction_space == "denoised":
            x_hat_c[moved] = x_hat[moved] + delta[moved]
            s_c[moved] = (alpha * x_hat_c[moved] - x[moved]) / (sigma * sigma)
        else:
            s_c[moved] = s[moved] + to_score_space(delta[moved], schedule, t)
            x_hat_c[moved] = (x[moved] + sigma * sigma * s_c[moved]) / alpha

    if t_next == 0.0:
        x_new = x_hat_c.copy()
    else:
        drift, g = drift_diffusion(schedule, t, x)
        noise = rngmod.batch_normal(state.streams, i, d)
        x_new = x - h * (drift - g * g * s_c) + g * math.sqrt(h) * noise

    bad = ~np.all(np.isfinite(x_new), axis=1)
    if bad.any():
        raise NumericalError(i, state.traj_ids[bad])

    active_count = np.array([a.size + p.size for a, p in zip(static_hits, peer_hits)], dtype=np.int64)
    rec = StepRecord(
        delta_norm=np.sqrt((delta * delta).sum(1)),
        score_norm=np.sqrt((s * s).sum(1)),
        active_count=active_count,
        degenerate=degenerate,
        static_hits=static_hits,
        peer_hits=peer_hits,
        x_hat=x_hat.copy() if snapshots else None,
    )
    return BatchState(x_new, t_next, i + 1, state.streams, state.traj_ids), rec


def count_violations(samples: np.ndarray, shields: Optional[ShieldSet], tol: float = 1e-9,
                     chunk: int = 2**22) -> int:
    """Samples strictly inside some shield, by exhaustive scan."""
    if shields is None or len(shields) == 0 or shields.radius <= 0:
        return 0
    centers = shields.centers
    limit = shields.radius - tol
    rows = max(1, chunk // max(1, centers.size))
    count = 0
    for lo in range(0, samples.shape[0], rows):
        diff = samples[lo:lo + rows, None, :] - centers[None, :, :]
        dmin = np.sqrt((diff * diff).sum(-1).min(1))
        count += int((dmin < limit).sum())
    return count


def generate(config: RunConfig) -> RunResult:
    """Run one batch from ``X_1 ~ N(0, I)`` down to ``t = 0``."""
    mix = config.mixture
    grid = TimeGrid(config.n_steps)
    traj_ids = config.trajectory_offset + np.arange(config.batch_size, dtype=np.int64)
    streams = rngmod.make_streams(config.seed, traj_ids)
    x1 = rngmod.prior_draw(streams, mix.dim)
    state = BatchState(x1, 1.0, 0, streams, traj_ids)
    trace = TrajectoryTrace.allocate(traj_ids, grid.times[:-1], mix.dim, config.snapshots)
    for _ in range(config.n_steps):
        step = state.step_index
        state, rec = backward_step(state, grid, config.schedule, mix, config.spell, config.shields,
                                   config.label, config.gamma, config.snapshots)
        trace.record(step, rec)
    shields = config.shields.shields if config.shields is not None else None
    violations = count_violations(state.states, shields)
    return RunResult(state.states, trace, violations, config.seed, traj_ids)


def sparsity_summary(trace: TrajectoryTrace, n_bins: int = 10) -> dict:
    """Activity per time bin and per-trajectory finish times.

    Bins split the steps into ``n_bins`` contiguous groups from ``t = 1`` down.
    ``active_fraction`` counts trajectories with a non-zero correction anywhere
    in the bin; ratios are ``|Delta| / |score|``. ``finish_time`` is the time of
    each trajectory's last non-zero correction (``nan`` if never active).
    """
    if trace.n_steps == 0 or trace.n_trajectories == 0:
        raise ValueError("empty trace")
    n_bins = min(n_bins, trace.n_steps)
    edges = np.linspace(0, trace.n_steps, n_bins + 1).round().astype(int)
    active = trace.delta_norm > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(trace.score_norm > 0, trace.delta_norm / trace.score_norm, 0.0)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        rows.append({
            "bin_start_step": int(lo),
            "bin_end_step": int(hi),
            "t_start": float(trace.times[lo]),
            "t_end": float(trace.times[hi - 1]),
            "active_fraction": float(active[:, lo:hi].any(1).mean()),
            "mean_ratio": float(ratio[:, lo:hi].mean()),
            "max_ratio": float(ratio[:, lo:hi].max()),
        })
    finish = np.full(trace.n_trajectories, np.nan)
    for b in range(trace.n_trajectories):
        steps = np.flatnonzero(active[b])
        if steps.size:
            finish[b] = trace.times[steps[-1]]
    return {"bins": rows, "finish_time": finish}


def median_finish_time(trace: TrajectoryTrace) -> float:
    finish = sparsity_summary(trace)["finish_time"]
    finish = finish[~np.isnan(finish)]
    return float(np.median(finish)) if finish.size else float("nan")

