"""Experiment runner: single runs, sweeps, run comparison and plot-data export."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import artifacts as io
from .config import SWEEP_AXES, ConfigError, ExperimentConfig
from .guidance import ShieldSet, SpellConfig
from .metrics import MetricsReport, evaluate
from .mixture import GaussianMixture
from .sampler import (RunConfig, RunResult, StaticShields, TrajectoryTrace, generate,
                      median_finish_time, sparsity_summary)
from .schedule import NoiseSchedule
from .shield_index import IvfIndex, build_index, load_index, save_index

METRIC_FIELDS = ("vendi", "precision", "recall", "density", "coverage", "frechet_raw")


class IncompatibleRunsError(ValueError):
    pass


# --- shields ------------------------------------------------------------------------


def sample_disjoint(mix: GaussianMixture, n: int, min_gap: float, rng: np.random.Generator,
                    max_rounds: int = 100) -> np.ndarray:
    """Draw from ``mix``, rejecting any point within ``min_gap`` of an accepted one.

    Candidates are visited in draw order, so the result depends only on the rng.
    """
    if min_gap <= 0:
        return mix.sample(n, rng)[0]
    d = mix.dim
    offsets = list(itertools.product((-1, 0, 1), repeat=d))
    grid: dict = {}
    accepted = []
    gap2 = min_gap * min_gap
    for _ in range(max_rounds):
        for p in mix.sample(n, rng)[0]:
            key = tuple(np.floor(p / min_gap).astype(np.int64).tolist())
            clash = False
            for off in offsets:
                for q in grid.get(tuple(k + o for k, o in zip(key, off)), ()):
                    diff = p - q
                    if diff @ diff <= gap2:
                        clash = True
                        break
                if clash:
                    break
            if not clash:
                accepted.append(p)
                grid.setdefault(key, []).append(p)
                if len(accepted) == n:
                    return np.array(accepted)
    raise ValueError(f"placed only {len(accepted)} of {n} points with gap {min_gap}")


@dataclass
class ResolvedShields:
    centers: np.ndarray
    index: Optional[IvfIndex] = None


def resolve_shield_centers(cfg: ExperimentConfig, mix: GaussianMixture) -> ResolvedShields:
    src = cfg.shields
    index = None
    if src.source == "none":
        centers = np.zeros((0, mix.dim))
    elif src.source == "inline":
        centers = np.array(src.centers, dtype=float).reshape(-1, mix.dim)
    elif src.source in ("file", "run"):
        path = Path(src.path)
        _, centers = io.load_samples(path / "samples.csv" if src.source == "run" else path)
    elif src.source == "index":
        index = load_index(src.path)
        centers = index.all_centers()
    else:
        centers = sample_disjoint(mix, src.count, src.min_gap, np.random.default_rng(src.seed))
    if centers.shape[1:] != (mix.dim,):
        raise ConfigError(f"shield centers have dimension {centers.shape[1]}, mixture has {mix.dim}",
                          "shields", None, cfg.source)
    if src.use_index and index is None and len(centers):
        index = build_index(centers, src.n_cells, src.index_seed)
    return ResolvedShields(centers, index if src.use_index else None)


def _static_source(cfg: ExperimentConfig, resolved: ResolvedShields) -> StaticShields:
    radius = cfg.shields.radius if cfg.shields.radius is not None else cfg.radius
    return StaticShields(ShieldSet(resolved.centers, radius), resolved.index, cfg.shields.n_probe)


# --- single run ---------------------------------------------------------------------


@dataclass
class ExperimentResult:
    run: RunResult
    metrics: Optional[MetricsReport]
    metadata: dict
    out_dir: Optional[Path]


def compute_metrics(cfg: ExperimentConfig, mix: GaussianMixture, samples: np.ndarray) -> MetricsReport:
    target = mix.conditional(cfg.label) if cfg.label is not None else mix
    ref = target.sample(cfg.reference_size, np.random.default_rng(cfg.reference_seed))[0]
    return evaluate(samples, ref, cfg.k, cfg.vendi_bandwidth, frechet_target=target)


def run_experiment(cfg: ExperimentConfig, out_dir=None, resolved: Optional[ResolvedShields] = None) -> ExperimentResult:
    """Generate ``n_batches`` batches and write the run's artifacts to ``out_dir``.

    With ``accumulate`` every finished batch is appended to the static shields
    for the batches after it.
    """
    mix = cfg.build_mixture()
    n_total = cfg.batch_size * cfg.n_batches
    if cfg.metrics and n_total < cfg.k + 1:
        raise ConfigError(f"metrics with k={cfg.k} need at least {cfg.k + 1} samples, run has {n_total}",
                          "metrics.k", None, cfg.source)
    if resolved is None:
        resolved = resolve_shield_centers(cfg, mix)
    static = _static_source(cfg, resolved)
    spell = SpellConfig(cfg.radius, cfg.overcompensation, cfg.mode, cfg.correction_space)
    schedule = NoiseSchedule(**cfg.schedule)

    start = time.perf_counter()
    results = []
    for b in range(cfg.n_batches):
        run_cfg = RunConfig(mixture=mix, schedule=schedule, n_steps=cfg.n_steps, batch_size=cfg.batch_size,
                            seed=cfg.seed, spell=spell, shields=static, label=cfg.label, gamma=cfg.gamma,
                            trajectory_offset=b * cfg.batch_size)
        res = generate(run_cfg)
        results.append(res)
        if cfg.accumulate:
            static = StaticShields(static.shields.extended(res.samples), None, static.n_probe)
    wall = time.perf_counter() - start

    run = RunResult(
        samples=np.concatenate([r.samples for r in results]),
        trace=TrajectoryTrace.concatenate(r.trace for r in results),
        violations=sum(r.violations for r in results),
        seed=cfg.seed,
        traj_ids=np.concatenate([r.traj_ids for r in results]),
    )
    report = compute_metrics(cfg, mix, run.samples) if cfg.metrics else None
    metadata = {
        "name": cfg.name,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "mixture_hash": cfg.mixture_hash(),
        "schedule": dict(cfg.schedule),
        "n_steps": cfg.n_steps,
        "batch_size": cfg.batch_size,
        "n_batches": cfg.n_batches,
        "n_samples": int(run.samples.shape[0]),
        "label": cfg.label,
        "gamma": cfg.gamma,
        "radius": cfg.radius,
        "overcompensation": cfg.overcompensation,
        "mode": cfg.mode,
        "n_probe": cfg.shields.n_probe if resolved.index is not None else None,
        "n_shields": int(len(resolved.centers)),
        "violations": int(run.violations),
        "violation_rate": run.violations / max(1, run.samples.shape[0]),
        "wall_time_s": wall,
        "wall_time_per_sample_s": wall / max(1, run.samples.shape[0]),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        write_run(out, cfg, run, report, metadata)
    return ExperimentResult(run, report, metadata, out)


def write_run(out: Path, cfg: ExperimentConfig, run: RunResult, report, metadata: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_samples(out / "samples.csv", run.traj_ids, run.samples)
    if cfg.trace:
        io.write_trace(out / "trace.csv", run.trace)
        io.write_interventions(out / "interventions.csv", run.trace)
    if report is not None:
        report.save(out / "metrics.json")
    io.write_json(out / "config.json", cfg.to_dict())
    io.write_json(out / "metadata.json", metadata)


# --- sweeps -------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list
    wall_time_per_sample: list = field(default_factory=list)
    out_dir: Optional[Path] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])


SWEEP_COLUMNS = ("point",) + SWEEP_AXES + METRIC_FIELDS + ("violations", "violation_rate")


def sweep_points(cfg: ExperimentConfig) -> list:
    base = {"radius": cfg.radius, "overcompensation": cfg.overcompensation,
            "gamma": cfg.gamma, "n_probe": cfg.shields.n_probe}
    axes = [cfg.sweep.get(a, [base[a]]) for a in SWEEP_AXES]
    return [dict(zip(SWEEP_AXES, combo)) for combo in itertools.product(*axes)]


def run_sweep(cfg: ExperimentConfig, out_dir=None) -> SweepResult:
    """One run per point of the product of the sweep axes.

    ``sweep.csv`` holds only deterministic columns; wall times live in
    ``sweep_metadata.json``.
    """
    if not cfg.sweep:
        raise ConfigError("sweep mode needs at least one sweep axis", "sweep", None, cfg.source)
    mix = cfg.build_mixture()
    resolved = resolve_shield_centers(cfg, mix)
    out = Path(out_dir) if out_dir is not None else None
    rows, walls = [], []
    for i, point in enumerate(sweep_points(cfg)):
        pcfg = cfg.with_overrides(**point)
        pdir = out / "points" / f"p{i:03d}" if out is not None else None
        res = run_experiment(pcfg, pdir, resolved)
        row = {"point": i, **point, "violations": res.run.violations,
               "violation_rate": res.metadata["violation_rate"]}
        for f in METRIC_FIELDS:
            row[f] = getattr(res.metrics, f) if res.metrics is not None else float("nan")
        rows.append(row)
        walls.append(res.metadata["wall_time_per_sample_s"])
    result = SweepResult(rows, walls, out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        io.write_rows(out / "sweep.csv", SWEEP_COLUMNS, rows)
        io.write_json(out / "config.json", cfg.to_dict())
        io.write_json(out / "sweep_metadata.json", {
            "name": cfg.name,
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
            "points": [{"point": i, "wall_time_per_sample_s": w} for i, w in enumerate(walls)],
            "timestamp": datetime.now(timezone.utc).isoformat(),
        })
    return result


# --- comparison ---------------------------------------------------------------------

COMPARE_COLUMNS = ("traj", "changed", "displacement", "active_steps", "shields", "peers")
_COMPAT_KEYS = ("seed", "schedule", "n_steps", "mixture_hash")


def compare_runs(baseline_dir, spell_dir, out_path=None) -> list:
    """Per-trajectory diff of two runs made with the same seed, schedule and mixture."""
    base_dir, spell_dir = Path(baseline_dir), Path(spell_dir)
    meta_a = io.read_json(base_dir / "metadata.json")
    meta_b = io.read_json(spell_dir / "metadata.json")
    for key in _COMPAT_KEYS:
        if meta_a.get(key) != meta_b.get(key):
            raise IncompatibleRunsError(f"runs differ in {key}: {meta_a.get(key)!r} vs {meta_b.get(key)!r}")
    traj_a, xa = io.load_samples(base_dir / "samples.csv")
    traj_b, xb = io.load_samples(spell_dir / "samples.csv")
    if not np.array_equal(np.sort(traj_a), np.sort(traj_b)):
        raise IncompatibleRunsError("runs cover different trajectory ids")
    xa = xa[np.argsort(traj_a)]
    order_b = np.argsort(traj_b)
    xb, traj = xb[order_b], traj_b[order_b]

    active_steps = dict.fromkeys(traj.tolist(), 0)
    shields = {t: set() for t in traj.tolist()}
    peers = {t: set() for t in traj.tolist()}
    if (spell_dir / "trace.csv").exists():
        tr = io.load_trace(spell_dir / "trace.csv", spell_dir / "interventions.csv")
        for t, n in zip(tr.traj_ids.tolist(), (tr.delta_norm > 0).sum(1).tolist()):
            active_steps[t] = int(n)
        for t, _, kind, sid in tr.interventions:
            (shields if kind == "shield" else peers)[t].add(sid)

    rows = []
    for i, t in enumerate(traj.tolist()):
        rows.append({
            "traj": t,
            "changed": bool(np.any(xa[i] != xb[i])),
            "displacement": float(np.linalg.norm(xb[i] - xa[i])),
            "active_steps": active_steps[t],
            "shields": ";".join(str(s) for s in sorted(shields[t])),
            "peers": ";".join(str(s) for s in sorted(peers[t])),
        })
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        io.write_rows(out_path, COMPARE_COLUMNS, rows)
    return rows


# --- plot data ----------------------------------------------------------------------

SPARSITY_COLUMNS = ("bin_start_step", "bin_end_step", "t_start", "t_end",
                    "active_fraction", "mean_ratio", "max_ratio")
PARETO_TABLES = {
    "pareto_precision_recall.csv": ("precision", "recall"),
    "pareto_density_coverage.csv": ("density", "coverage"),
    "pareto_frechet_vendi.csv": ("frechet_raw", "vendi"),
}


def emit_plot_data(run_dirs, out_dir, n_bins: int = 10) -> list:
    """Sparsity / finish-time CSVs for run directories, Pareto tables for sweeps.

    Returns the list of files written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, summary = [], []
    for i, d in enumerate(Path(p) for p in run_dirs):
        tag = f"{i:02d}_{d.name}"
        if (d / "sweep.csv").exists():
            rows = io.read_rows(d / "sweep.csv")
            for fname, (x, y) in PARETO_TABLES.items():
                path = out / f"{tag}_{fname}"
                io.write_rows(path, ("point",) + SWEEP_AXES + (x, y),
                              [{k: r[k] for k in ("point",) + SWEEP_AXES + (x, y)} for r in rows])
                written.append(path)
            continue
        trace_path = d / "trace.csv"
        if not trace_path.exists():
            raise FileNotFoundError(f"{d}: no trace.csv (run with trace: true)")
        trace = io.load_trace(trace_path)
        summ = sparsity_summary(trace, n_bins)
        path = out / f"{tag}_sparsity.csv"
        io.write_rows(path, SPARSITY_COLUMNS, summ["bins"])
        written.append(path)
        path = out / f"{tag}_finish.csv"
        io.write_rows(path, ("traj", "finish_time"),
                      [{"traj": int(t), "finish_time": float(f)} for t, f in zip(trace.traj_ids, summ["finish_time"])])
        written.append(path)
        finish = summ["finish_time"]
        summary.append({"run": tag, "n_trajectories": trace.n_trajectories,
                        "n_active": int(np.sum(~np.isnan(finish))),
                        "median_finish_time": median_finish_time(trace)})
    if summary:
        path = out / "finish_summary.csv"
        io.write_rows(path, ("run", "n_trajectories", "n_active", "median_finish_time"), summary)
        written.append(path)
    return written


# --- index --------------------------------------------------------------------------


def build_index_file(cfg: ExperimentConfig, out_path) -> IvfIndex:
    mix = cfg.build_mixture()
    src = cfg.shields
    if src.source == "none":
        raise ConfigError("build-index needs a shield source", "shields.source", None, cfg.source)
    resolved = resolve_shield_centers(cfg, mix)
    index = resolved.index or build_index(resolved.centers, src.n_cells, src.index_seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out_path)
    return index

