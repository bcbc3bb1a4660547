"""Simulation configuration: JSON document with strict validation."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bargaining import BargainingConfig

MODES = ("centralized", "decentralized", "coalitional")
SOURCES = ("benchmark", "file")
LOAD_KINDS = ("default", "steps", "random")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.message, self.line = message, line


@dataclass
class ModelConfig:
    source: str = "benchmark"
    scenario: str = "S1"
    P0: float = 2.0
    edges: list | None = None
    input_bounds: list | None = None
    area_params: dict = field(default_factory=dict)
    path: str | None = None


@dataclass
class WeightConfig:
    q_coop: float = 1000.0
    base_diag: list = field(default_factory=lambda: [500.0, 0.01, 0.01, 10.0])
    r: float = 10.0
    Qf_scale: float = 20.0


@dataclass
class LoadConfig:
    kind: str = "default"
    steps: dict = field(default_factory=dict)
    step_time: int = 5
    fraction: list = field(default_factory=lambda: [0.3, 0.9])


@dataclass
class OutputConfig:
    dir: str | None = None
    states_csv: str = "states.csv"
    flows_csv: str = "flows.csv"
    events_jsonl: str = "events.jsonl"
    summary_json: str = "summary.json"


@dataclass
class SimulationConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mode: str = "coalitional"
    bargaining: dict = field(default_factory=dict)
    c_coal: float = 1e-3
    coop_exponent: float = 2.0
    weights: WeightConfig = field(default_factory=WeightConfig)
    loads: LoadConfig = field(default_factory=LoadConfig)
    Np: int = 5
    T_sim: int = 80
    Ts: float = 1.0
    rng_seed: int = 0
    randomize_loads: bool = True
    randomize_subsets: bool = True
    initial_structure: Any = "singletons"
    x0: list | None = None
    track_shapley: bool = False
    outputs: OutputConfig = field(default_factory=OutputConfig)

    @property
    def bargaining_config(self) -> BargainingConfig:
        return BargainingConfig(**self.bargaining)

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {"model": ModelConfig, "weights": WeightConfig, "loads": LoadConfig, "outputs": OutputConfig}
_BARGAINING_FIELDS = {f.name for f in dataclasses.fields(BargainingConfig)}


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _build(cls, data, text, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object", _line_of(text, prefix.split('.')[-1]))
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown field '{prefix + '.' if prefix else ''}{k}'", _line_of(text, k))
    kw = {}
    for k, v in data.items():
        if k in _NESTED and cls is SimulationConfig:
            kw[k] = _build(_NESTED[k], v, text, k)
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(data: dict, text: str | None = None) -> SimulationConfig:
    cfg = _build(SimulationConfig, data, text, "")
    validate(cfg, text)
    return cfg


def validate(cfg: SimulationConfig, text: str | None = None) -> None:
    def fail(msg, key):
        raise ConfigError(msg, _line_of(text, key))

    if cfg.mode not in MODES:
        fail(f"mode must be one of {MODES}, got {cfg.mode!r}", "mode")
    m = cfg.model
    if m.source not in SOURCES:
        fail(f"model.source must be one of {SOURCES}", "source")
    if m.source == "file" and not m.path:
        fail("model.path is required when model.source is 'file'", "source")
    if m.source == "benchmark" and m.scenario not in ("S1", "S2"):
        fail("model.scenario must be 'S1' or 'S2'", "scenario")
    if m.input_bounds is not None and len(m.input_bounds) != 5:
        fail("model.input_bounds needs 5 entries", "input_bounds")
    for k in cfg.bargaining:
        if k not in _BARGAINING_FIELDS:
            fail(f"unknown field 'bargaining.{k}'", k)
    try:
        cfg.bargaining_config
    except (TypeError, ValueError) as exc:
        fail(f"bargaining: {exc}", "bargaining")
    for name, lo in (("Np", 1), ("T_sim", 1)):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < lo:
            fail(f"{name} must be an integer >= {lo}", name)
    if not (isinstance(cfg.Ts, (int, float)) and cfg.Ts > 0):
        fail("Ts must be positive", "Ts")
    if not (isinstance(cfg.c_coal, (int, float)) and cfg.c_coal >= 0):
        fail("c_coal must be nonnegative", "c_coal")
    if not isinstance(cfg.rng_seed, int):
        fail("rng_seed must be an integer", "rng_seed")
    if cfg.loads.kind not in LOAD_KINDS:
        fail(f"loads.kind must be one of {LOAD_KINDS}", "kind")
    if len(cfg.loads.fraction) != 2 or not 0 <= cfg.loads.fraction[0] <= cfg.loads.fraction[1]:
        fail("loads.fraction must be [lo, hi] with 0 <= lo <= hi", "fraction")
    if cfg.initial_structure not in ("singletons", "grand") and not isinstance(cfg.initial_structure, list):
        fail("initial_structure must be 'singletons', 'grand' or a list of coalitions", "initial_structure")
    if len(cfg.weights.base_diag) != 4:
        fail("weights.base_diag needs 4 entries", "base_diag")


def loads_config(text: str, path: str | None = None) -> SimulationConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error: {exc.msg}", exc.lineno, path) from None
    try:
        return config_from_dict(data, text)
    except ConfigError as exc:
        raise ConfigError(exc.message, exc.line, path) from None
    except TypeError as exc:
        raise ConfigError(str(exc), None, path) from None


def load_config(path) -> SimulationConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return loads_config(text, path)


def dumps_config(cfg: SimulationConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_config(cfg: SimulationConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))
