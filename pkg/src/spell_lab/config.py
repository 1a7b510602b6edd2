"""Experiment configuration: YAML loading with line-numbered diagnostics.

A config is a single YAML mapping. See the README for the full grammar; the
short version is::

    name: collapse
    seed: 0
    n_steps: 50
    batch_size: 32
    n_batches: 1
    schedule: {beta_min: 0.1, beta_max: 20.0, t_min: 0.001}
    mixture: {ring: {n_modes: 8, radius: 40, std: 8}}   # or {components: [...]} or a path
    guidance: {label: 0, gamma: 5.0}
    spell: {radius: 15, overcompensation: 1.0, mode: intra_batch}
    shields: {source: none}
    metrics: {enabled: true, k: 3, reference_size: 2000, reference_seed: 123}
    trace: true
    sweep: {radius: [0, 15], n_probe: [1, 2]}
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .guidance import CORRECTION_SPACES, MODES
from .mixture import GaussianMixture, ring_means

SCENARIOS = ("collapse", "protection", "iterative")
SHIELD_SOURCES = ("none", "inline", "file", "index", "run", "sampled")
SWEEP_AXES = ("radius", "overcompensation", "gamma", "n_probe")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a dotted path, ``line`` is 1-based."""

    def __init__(self, message: str, field: str = "", line: Optional[int] = None, source: str = ""):
        self.field = field
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: " + (f"{field}: " if field else "")
        super().__init__(prefix + message)


# --- YAML with source positions ---------------------------------------------------


def _to_python(node, path: str, marks: dict, source: str = ""):
    """Convert a composed YAML node, recording the line of every dotted path."""
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError("duplicate key", sub, key_node.start_mark.line + 1, source)
            out[key] = _to_python(value_node, sub, marks, source)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, f"{path}[{i}]", marks, source) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def parse_yaml(text: str, source: str = "") -> tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line=line, source=source) from exc
    if node is None:
        raise ConfigError("empty config", source=source)
    marks: dict = {}
    data = _to_python(node, "", marks, source)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1, source=source)
    return data, marks


# --- typed accessors ----------------------------------------------------------------


class _Reader:
    def __init__(self, data: dict, marks: dict, source: str, base_dir: Path):
        self.data = data
        self.marks = marks
        self.source = source
        self.base_dir = base_dir

    def error(self, path: str, message: str) -> ConfigError:
        line = self.marks.get(path)
        probe = path
        while line is None and "." in probe:
            probe = probe.rsplit(".", 1)[0]
            line = self.marks.get(probe)
        return ConfigError(message, path, line, self.source)

    def section(self, name: str, allowed: tuple) -> dict:
        value = self.data.get(name, {})
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise self.error(name, "must be a mapping")
        for key in value:
            if key not in allowed:
                raise self.error(f"{name}.{key}", f"unknown key (allowed: {', '.join(allowed)})")
        return value

    def number(self, path: str, value, *, integer=False, minimum=None, positive=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, f"expected a number, got {value!r}")
        if integer and not float(value).is_integer():
            raise self.error(path, f"expected an integer, got {value!r}")
        value = int(value) if integer else float(value)
        if positive and not value > 0:
            raise self.error(path, f"must be > 0, got {value}")
        if minimum is not None and value < minimum:
            raise self.error(path, f"must be >= {minimum}, got {value}")
        return value

    def path(self, name: str, value) -> Path:
        if not isinstance(value, str):
            raise self.error(name, "expected a file path")
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            raise self.error(name, f"referenced file does not exist: {p}")
        return p


# --- config object ------------------------------------------------------------------


@dataclass
class ShieldSource:
    source: str = "none"
    radius: Optional[float] = None
    centers: Optional[list] = None  # inline
    path: Optional[str] = None  # file (samples-style CSV), index, run directory
    count: int = 0  # sampled
    seed: int = 0
    min_gap: float = 0.0
    use_index: bool = False
    n_cells: Optional[int] = None
    index_seed: int = 0
    n_probe: int = 2


@dataclass
class ExperimentConfig:
    name: str
    mixture: dict
    seed: int = 0
    n_steps: int = 50
    batch_size: int = 1
    n_batches: int = 1
    schedule: dict = field(default_factory=lambda: {"beta_min": 0.1, "beta_max": 20.0, "t_min": 1e-3})
    label: Any = None
    gamma: float = 1.0
    radius: float = 0.0
    overcompensation: float = 1.0
    mode: str = "static"
    correction_space: str = "denoised"
    accumulate: bool = False
    shields: ShieldSource = field(default_factory=ShieldSource)
    metrics: bool = True
    k: int = 3
    reference_size: int = 2000
    reference_seed: int = 123
    vendi_bandwidth: Optional[float] = None
    trace: bool = True
    sweep: dict = field(default_factory=dict)
    output: Optional[str] = None
    source: str = ""

    def build_mixture(self) -> GaussianMixture:
        return mixture_from_config(self.mixture)

    def to_dict(self) -> dict:
        d = {k: copy.deepcopy(v) for k, v in self.__dict__.items() if k not in ("output", "source", "shields")}
        d["shields"] = dict(self.shields.__dict__)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def mixture_hash(self) -> str:
        spec = self.build_mixture().to_spec()
        return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        shield_kw = {k: kw.pop(k) for k in ("n_probe",) if k in kw}
        for key, value in kw.items():
            if not hasattr(out, key):
                raise AttributeError(key)
            setattr(out, key, value)
        for key, value in shield_kw.items():
            setattr(out.shields, key, value)
        return out


def mixture_from_config(spec: dict) -> GaussianMixture:
    if "ring" in spec:
        return ring_mixture(**spec["ring"])
    return GaussianMixture.from_spec(spec)


def ring_mixture(n_modes: int, radius: float, std: float, phase: float = 0.0,
                 classes: Optional[list] = None) -> GaussianMixture:
    """Modes on a circle; ``classes`` is a list of ``{label, weight, modes}``.

    Each class spreads its weight evenly over its modes, one component per
    (class, mode) pair. Without classes the modes are unlabeled and equally
    weighted.
    """
    means = ring_means(n_modes, radius, phase)
    if not classes:
        return GaussianMixture.isotropic(np.full(n_modes, 1.0 / n_modes), means, std)
    weights, mus, labels = [], [], []
    for cls in classes:
        modes = list(cls.get("modes", range(n_modes)))
        for m in modes:
            weights.append(float(cls["weight"]) / len(modes))
            mus.append(means[m])
            labels.append(cls["label"])
    w = np.array(weights)
    return GaussianMixture.isotropic(w / w.sum(), np.array(mus), std, labels)


# --- loading ------------------------------------------------------------------------

_TOP_KEYS = ("name", "seed", "n_steps", "batch_size", "n_batches", "schedule", "mixture", "guidance",
             "spell", "shields", "metrics", "trace", "sweep", "output")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return config_from_text(path.read_text(), source=str(path), base_dir=path.parent)


def scenario_text(name: str) -> str:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r} (bundled: {', '.join(SCENARIOS)})")
    return resources.files(__package__).joinpath("scenarios", f"{name}.yaml").read_text()


def load_scenario(name: str) -> ExperimentConfig:
    return config_from_text(scenario_text(name), source=f"scenario:{name}", base_dir=Path.cwd())


def config_from_text(text: str, source: str = "", base_dir: Path = Path(".")) -> ExperimentConfig:
    data, marks = parse_yaml(text, source)
    rd = _Reader(data, marks, source, base_dir)
    for key in data:
        if key not in _TOP_KEYS:
            raise rd.error(key, f"unknown key (allowed: {', '.join(_TOP_KEYS)})")
    if "mixture" not in data:
        raise ConfigError("missing required section", "mixture", None, source)

    cfg = ExperimentConfig(name=str(data.get("name", Path(source).stem or "run")), mixture={}, source=source)
    for key in ("seed", "n_steps", "batch_size", "n_batches"):
        if key in data:
            minimum = 0 if key == "seed" else 1
            setattr(cfg, key, rd.number(key, data[key], integer=True, minimum=minimum))

    sched = rd.section("schedule", ("beta_min", "beta_max", "t_min"))
    for key, value in sched.items():
        cfg.schedule[key] = rd.number(f"schedule.{key}", value, positive=True)
    if cfg.schedule["beta_max"] < cfg.schedule["beta_min"]:
        raise rd.error("schedule.beta_max", "must be >= beta_min")

    cfg.mixture = _read_mixture(rd, data["mixture"])

    guide = rd.section("guidance", ("label", "gamma"))
    cfg.label = guide.get("label")
    if "gamma" in guide:
        cfg.gamma = rd.number("guidance.gamma", guide["gamma"], minimum=1.0)
    if cfg.label is not None:
        try:
            cfg.build_mixture().conditional(cfg.label)
        except KeyError:
            raise rd.error("guidance.label", f"no mixture component carries label {cfg.label!r}") from None

    spell = rd.section("spell", ("radius", "overcompensation", "mode", "correction_space", "accumulate"))
    if "radius" in spell:
        cfg.radius = rd.number("spell.radius", spell["radius"], minimum=0.0)
    if "overcompensation" in spell:
        cfg.overcompensation = rd.number("spell.overcompensation", spell["overcompensation"], minimum=0.0)
    cfg.mode = spell.get("mode", cfg.mode)
    if cfg.mode not in MODES:
        raise rd.error("spell.mode", f"must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    cfg.correction_space = spell.get("correction_space", cfg.correction_space)
    if cfg.correction_space not in CORRECTION_SPACES:
        raise rd.error("spell.correction_space", f"must be one of {', '.join(CORRECTION_SPACES)}")
    cfg.accumulate = spell.get("accumulate", cfg.mode == "mixed")
    if not isinstance(cfg.accumulate, bool):
        raise rd.error("spell.accumulate", "expected true or false")

    cfg.shields = _read_shields(rd, cfg)
    if cfg.accumulate and cfg.shields.use_index:
        raise rd.error("spell.accumulate", "accumulating shields cannot be combined with an IVF index")

    met = data.get("metrics", {})
    if isinstance(met, bool):
        met = {"enabled": met}
    if not isinstance(met, dict):
        raise rd.error("metrics", "must be a mapping or a boolean")
    for key in met:
        if key not in ("enabled", "k", "reference_size", "reference_seed", "vendi_bandwidth"):
            raise rd.error(f"metrics.{key}", "unknown key")
    cfg.metrics = bool(met.get("enabled", True))
    if "k" in met:
        cfg.k = rd.number("metrics.k", met["k"], integer=True, minimum=1)
    if "reference_size" in met:
        cfg.reference_size = rd.number("metrics.reference_size", met["reference_size"], integer=True, minimum=2)
    if "reference_seed" in met:
        cfg.reference_seed = rd.number("metrics.reference_seed", met["reference_seed"], integer=True, minimum=0)
    if met.get("vendi_bandwidth") is not None:
        cfg.vendi_bandwidth = rd.number("metrics.vendi_bandwidth", met["vendi_bandwidth"], positive=True)

    if "trace" in data:
        if not isinstance(data["trace"], bool):
            raise rd.error("trace", "expected true or false")
        cfg.trace = data["trace"]

    sweep = rd.section("sweep", SWEEP_AXES)
    for axis, values in sweep.items():
        p = f"sweep.{axis}"
        if not isinstance(values, list) or not values:
            raise rd.error(p, "sweep axes must be non-empty lists")
        if axis == "n_probe":
            vals = [rd.number(f"{p}[{i}]", v, integer=True, minimum=1) for i, v in enumerate(values)]
        elif axis == "gamma":
            vals = [rd.number(f"{p}[{i}]", v, minimum=1.0) for i, v in enumerate(values)]
        else:
            vals = [rd.number(f"{p}[{i}]", v, minimum=0.0) for i, v in enumerate(values)]
        cfg.sweep[axis] = vals
    if "n_probe" in cfg.sweep and not cfg.shields.use_index:
        raise rd.error("sweep.n_probe", "an n_probe sweep needs shields.use_index: true")

    if data.get("output") is not None:
        cfg.output = str(data["output"])
    return cfg


def _read_mixture(rd: _Reader, value) -> dict:
    if isinstance(value, str):
        p = rd.path("mixture", value)
        sub, _ = parse_yaml(p.read_text(), str(p))
        value = sub
    if not isinstance(value, dict):
        raise rd.error("mixture", "expected a mapping or a path to one")
    if "ring" in value:
        ring = value["ring"]
        if not isinstance(ring, dict):
            raise rd.error("mixture.ring", "must be a mapping")
        for key in ring:
            if key not in ("n_modes", "radius", "std", "phase", "classes"):
                raise rd.error(f"mixture.ring.{key}", "unknown key")
        for key in ("n_modes", "radius", "std"):
            if key not in ring:
                raise rd.error("mixture.ring", f"missing required key {key!r}")
        rd.number("mixture.ring.n_modes", ring["n_modes"], integer=True, minimum=1)
        rd.number("mixture.ring.radius", ring["radius"], minimum=0.0)
        rd.number("mixture.ring.std", ring["std"], positive=True)
        for i, cls in enumerate(ring.get("classes") or []):
            if not isinstance(cls, dict) or "label" not in cls or "weight" not in cls:
                raise rd.error(f"mixture.ring.classes[{i}]", "each class needs label and weight")
            rd.number(f"mixture.ring.classes[{i}].weight", cls["weight"], positive=True)
            for j, m in enumerate(cls.get("modes", [])):
                if not isinstance(m, int) or not 0 <= m < ring["n_modes"]:
                    raise rd.error(f"mixture.ring.classes[{i}].modes[{j}]", f"mode index out of range: {m!r}")
    elif "components" not in value or "dim" not in value:
        raise rd.error("mixture", "expected either 'ring' or 'dim' + 'components'")
    try:
        mixture_from_config(value)
    except (ValueError, KeyError, TypeError) as exc:
        raise rd.error("mixture", f"invalid mixture: {exc}") from None
    return value


def _read_shields(rd: _Reader, cfg: ExperimentConfig) -> ShieldSource:
    sec = rd.section("shields", ("source", "radius", "centers", "path", "count", "seed", "min_gap",
                                 "use_index", "n_cells", "index_seed", "n_probe"))
    out = ShieldSource()
    out.source = sec.get("source", "none")
    if out.source not in SHIELD_SOURCES:
        raise rd.error("shields.source", f"must be one of {', '.join(SHIELD_SOURCES)}, got {out.source!r}")
    if sec.get("radius") is not None:
        out.radius = rd.number("shields.radius", sec["radius"], minimum=0.0)
    dim = cfg.build_mixture().dim
    if out.source == "inline":
        centers = sec.get("centers")
        if not isinstance(centers, list):
            raise rd.error("shields.centers", "inline shields need a list of centers")
        for i, c in enumerate(centers):
            if not isinstance(c, list) or len(c) != dim:
                raise rd.error(f"shields.centers[{i}]", f"expected a list of {dim} numbers")
            for j, v in enumerate(c):
                rd.number(f"shields.centers[{i}][{j}]", v)
        out.centers = [[float(v) for v in c] for c in centers]
    elif out.source in ("file", "index", "run"):
        if "path" not in sec:
            raise rd.error("shields.path", f"source {out.source!r} needs a path")
        p = rd.path("shields.path", sec["path"])
        if out.source == "run" and not (p / "samples.csv").exists():
            raise rd.error("shields.path", f"no samples.csv in run directory {p}")
        out.path = str(p)
    elif out.source == "sampled":
        if "count" not in sec:
            raise rd.error("shields.count", "sampled shields need a count")
        out.count = rd.number("shields.count", sec["count"], integer=True, minimum=1)
        out.seed = rd.number("shields.seed", sec.get("seed", 0), integer=True, minimum=0)
        out.min_gap = rd.number("shields.min_gap", sec.get("min_gap", 0.0), minimum=0.0)
    out.use_index = sec.get("use_index", out.source == "index")
    if not isinstance(out.use_index, bool):
        raise rd.error("shields.use_index", "expected true or false")
    if sec.get("n_cells") is not None:
        out.n_cells = rd.number("shields.n_cells", sec["n_cells"], integer=True, minimum=1)
    out.index_seed = rd.number("shields.index_seed", sec.get("index_seed", 0), integer=True, minimum=0)
    out.n_probe = rd.number("shields.n_probe", sec.get("n_probe", 2), integer=True, minimum=1)
    return out
