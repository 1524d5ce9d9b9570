"""Experiment configuration: sectioned INI files mapped onto typed dataclasses.

Every key has a default, so a config only needs the values it changes.
Unknown sections or keys are rejected so typos surface immediately.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
import re

import numpy as np

from .objectives import (ProblemSpec, load_libsvm, make_problem, partition_uniform,
                         quadratic_locals)
from .topology import build_consensus, build_graph, ConsensusMatrix, Graph

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config_text",
    "build_problem",
    "resolve_probabilities",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``section.key``."""


def _floats(text):
    return tuple(float(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _words(text):
    return tuple(t for t in re.split(r"[,\s]+", text.strip()) if t)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class TopologySection:
    kind: str = "complete"
    n: int = 5
    seed: int = 0
    er_probability: float | None = None


@dataclass(frozen=True)
class ObjectiveSection:
    family: str = "quadratic"
    # quadratic: scalars broadcast to all agents; "index" means b_i = i + 1
    c: str = "1"
    b: str = "index"
    dataset: str | None = None
    upsilon: float = 1.0
    alpha: float = 1.0
    zero_as_negative: bool = False
    partition_seed: int = 0


@dataclass(frozen=True)
class ScheduleSection:
    mode: str = "scaled"
    probabilities: str = "uniform"


@dataclass(frozen=True)
class RunSection:
    eps: str = "auto"
    T: int = 5000
    seeds: int = 10
    seed: int = 0
    record_every: int = 100
    algorithms: tuple = ("async_newton",)
    sync_eps: str = "same"
    sync_K: int = 1
    slow_agent: int | None = None
    slow_factor: float = 100.0
    stop_rel_err: float | None = None


@dataclass(frozen=True)
class OutputsSection:
    directory: str = "out"
    formats: tuple = ("csv", "gnuplot")


@dataclass(frozen=True)
class SweepSection:
    topologies: tuple = ("complete", "path")
    sizes: tuple = (5, 10)
    seeds: int = 10
    eps_rel: float = 0.01
    T_max: int = 200000


@dataclass(frozen=True)
class VerifySection:
    states: int = 20
    seeds: int = 30
    T: int = 2000
    invalid_eps: bool = False
    tamper_row_sum: float = 0.0


_SCALARS = {"int": int, "float": float, "str": str, "bool": _bool, "int|None": _opt(int),
            "float|None": _opt(float), "str|None": _opt(str)}

# tuple-valued keys and their element types
_TUPLES = {("run", "algorithms"): _words, ("outputs", "formats"): _words,
           ("sweep", "topologies"): _words,
           ("sweep", "sizes"): lambda t: tuple(int(v) for v in _floats(t))}

_SECTIONS = {
    "topology": TopologySection, "objective": ObjectiveSection, "schedule": ScheduleSection,
    "run": RunSection, "outputs": OutputsSection, "sweep": SweepSection,
    "verify": VerifySection,
}

ALGORITHMS = ("async_newton", "sync_newton", "gossip")


def _parser_for(cls, f):
    ann = str(f.type).replace(" ", "")
    if ann not in _SCALARS:
        raise TypeError(f"no parser for {cls.__name__}.{f.name}: {ann}")
    return _SCALARS[ann]


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologySection = field(default_factory=TopologySection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    run: RunSection = field(default_factory=RunSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    verify: VerifySection = field(default_factory=VerifySection)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        self._validate()

    def _validate(self):
        t, o, s, r = self.topology, self.objective, self.schedule, self.run
        if t.n < 2:
            raise ConfigError("topology.n: need at least 2 agents")
        if o.family not in ("quadratic", "logistic"):
            raise ConfigError(f"objective.family: expected quadratic or logistic, got {o.family!r}")
        if o.family == "logistic" and not o.dataset:
            raise ConfigError("objective.dataset: required for the logistic family")
        if not o.alpha > 0:
            raise ConfigError("objective.alpha: must be positive")
        if not o.upsilon > 0:
            raise ConfigError("objective.upsilon: must be positive")
        if s.mode not in ("scaled", "uniform_unscaled"):
            raise ConfigError(f"schedule.mode: expected scaled or uniform_unscaled, got {s.mode!r}")
        for key, val, words in (("run.eps", r.eps, ("auto",)),
                                ("run.sync_eps", r.sync_eps, ("auto", "same"))):
            if val not in words:
                try:
                    if not float(val) > 0:
                        raise ValueError
                except ValueError:
                    raise ConfigError(f"{key}: expected a positive number or one of {words}") from None
        if r.T < 0 or r.seeds < 1 or r.record_every < 1:
            raise ConfigError("run.T / run.seeds / run.record_every: out of range")
        bad = [a for a in r.algorithms if a not in ALGORITHMS]
        if bad or not r.algorithms:
            raise ConfigError(f"run.algorithms: unknown {bad}; choose from {ALGORITHMS}")
        if r.slow_agent is not None and not 0 <= r.slow_agent < t.n:
            raise ConfigError("run.slow_agent: not a valid agent index")

    # serialization

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_seed_base(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=seed))

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def eps_auto(self) -> bool:
        return self.run.eps == "auto"


def parse_config_text(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    sections = {}
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"[{name}]: unknown section; expected one of {list(_SECTIONS)}")
        cls = _SECTIONS[name]
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
            conv = _TUPLES.get((name, key)) or _parser_for(cls, known[key])
            try:
                kwargs[key] = conv(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}.{key}: bad value {raw!r} ({exc})") from None
        sections[name] = cls(**kwargs)
    return ExperimentConfig(**sections, base_dir=str(base_dir))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text(), base_dir=path.parent)
    ds = cfg.resolve(cfg.objective.dataset)
    if cfg.objective.family == "logistic" and not ds.exists():
        raise ConfigError(f"objective.dataset: file not found: {ds}")
    return cfg


def _per_agent(text: str, n: int, key: str, index_default) -> np.ndarray:
    if text.strip() == "index":
        return index_default
    vals = _floats(text)
    if len(vals) == 1:
        return np.full(n, vals[0])
    if len(vals) != n:
        raise ConfigError(f"{key}: expected 1 or {n} values, got {len(vals)}")
    return np.array(vals)


def build_problem(cfg: ExperimentConfig, *, kind: str | None = None,
                  n: int | None = None) -> tuple[Graph, ConsensusMatrix, ProblemSpec]:
    """Graph, consensus matrix and problem; ``kind``/``n`` override the topology section."""
    t, o = cfg.topology, cfg.objective
    kind = kind or t.kind
    n = n or t.n
    g = build_graph(kind, n, seed=t.seed, p=t.er_probability if "erdos" in kind else None)
    cm = build_consensus(g)
    if o.family == "quadratic":
        c = _per_agent(o.c, n, "objective.c", np.ones(n))
        if np.any(c <= 0):
            raise ConfigError("objective.c: weights must be positive")
        b = _per_agent(o.b, n, "objective.b", np.arange(1.0, n + 1.0))
        locals_ = quadratic_locals(c, b)
    else:
        ds = load_libsvm(cfg.resolve(o.dataset), zero_as_negative=o.zero_as_negative)
        locals_ = partition_uniform(ds, n, o.partition_seed, upsilon=o.upsilon)
    return g, cm, make_problem(locals_, cm, o.alpha)


def resolve_probabilities(cfg: ExperimentConfig, n: int | None = None) -> np.ndarray:
    n = n or cfg.topology.n
    text = cfg.schedule.probabilities.strip()
    if text == "uniform":
        return np.full(n, 1.0 / n)
    m = re.fullmatch(r"random_dirichlet\(\s*(\d+)\s*\)", text)
    if m:
        return np.random.default_rng(int(m.group(1))).dirichlet(np.ones(n))
    try:
        p = np.array(_floats(text))
    except ValueError:
        raise ConfigError(f"schedule.probabilities: cannot parse {text!r}") from None
    if p.size != n:
        raise ConfigError(f"schedule.probabilities: expected {n} values, got {p.size}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"schedule.probabilities: sum is {p.sum()!r}, not 1 (tolerance 1e-9)")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ConfigError("schedule.probabilities: entries must lie in (0, 1)")
    return p
