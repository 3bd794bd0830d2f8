"""
config.py - Effective configuration for every workflow

DEFAULT_CONFIG holds one section per concern. The effective configuration is
the defaults, updated by an optional JSON file, updated by `section.key=value`
overrides (values parsed as JSON, plain strings otherwise). Typed views are
built with the build_* helpers.

Usage:
    cfg = load_config("study.json", ["problem.variant=\\"variable-terminal\\"", "solver.max_wall_time_s=30"])
    spec = build_problem(cfg)
"""

import copy
import json
from dataclasses import fields
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from bench import StudyConfig
from cr3bp import SystemParams
from datagen import AlphaMode, GenerationConfig, fingerprint
from ddpm import TrainConfig
from halo import HaloSettings
from nlp import SolverConfig
from transcribe import ProblemSpec, SpiralConfig, Variant


class ConfigError(Exception):
    """Invalid configuration file, section, key or value"""


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section(obj, exclude: Sequence[str] = ()) -> Dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj) if f.name not in exclude}


# Desk-scale defaults: 10 segments, 60 s solver cap
DEFAULT_CONFIG: Dict[str, Dict] = {
    "system": _section(SystemParams()),
    "spiral": _section(SpiralConfig()),
    "problem": {**_section(ProblemSpec(), exclude=("spiral",)), "n_segments": 10},
    "halo": _section(HaloSettings()),
    "solver": _section(SolverConfig()),
    "generation": _section(GenerationConfig()),
    "train": _section(TrainConfig()),
    "sampling": {"alpha": 0.5, "n": 100, "guidance_w": 1.3, "seed": 0},
    "study": _section(StudyConfig()),
}

SEEDED_KEYS = (("generation", "root_seed"), ("train", "seed"), ("sampling", "seed"), ("study", "root_seed"))


def _check_value(section: str, key: str, value):
    default = DEFAULT_CONFIG[section][key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = float(value).is_integer()
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def _set(cfg: Dict, section: str, key: str, value):
    if section not in DEFAULT_CONFIG:
        raise ConfigError(f"unknown section '{section}'")
    if key not in DEFAULT_CONFIG[section]:
        raise ConfigError(f"unknown key '{section}.{key}'")
    _check_value(section, key, value)
    if isinstance(DEFAULT_CONFIG[section][key], int) and not isinstance(DEFAULT_CONFIG[section][key], bool):
        value = int(value)
    cfg[section][key] = value


def parse_override(text: str):
    """'section.key=value' -> (section, key, value)"""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    path, raw = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key '{path}' must be section.key")
    section, key = path.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> Dict:
    """
    Effective configuration.

    Args:
        path: JSON file with a subset of the sections
        overrides: 'section.key=value' strings, applied last
        seed: root seed for every random stream when given

    Raises:
        ConfigError: unreadable file, unknown section/key, wrong value type
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(Path(path)) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section '{section}' must be an object")
            for key, value in values.items():
                _set(cfg, section, key, value)
    for text in overrides:
        _set(cfg, *parse_override(text))
    if seed is not None:
        for section, key in SEEDED_KEYS:
            cfg[section][key] = int(seed)
    validate(cfg)
    return cfg


def config_fingerprint(cfg: Dict) -> str:
    return fingerprint(cfg)


def artifact_header(cfg: Dict, code_version: str, command: str, inputs: Optional[Dict[str, str]] = None) -> Dict:
    """Header echoed into every artifact: effective config and input fingerprints"""
    return {
        "command": command,
        "code_version": code_version,
        "config": cfg,
        "config_fingerprint": config_fingerprint(cfg),
        "inputs": inputs or {},
    }


# ============================================================================
# TYPED VIEWS
# ============================================================================

def _build(cls, values: Dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{section}': {e}") from e


def _violations(section: str, violations: List[str]):
    if violations:
        raise ConfigError(f"section '{section}': " + "; ".join(violations))


def build_system(cfg: Dict) -> SystemParams:
    p = _build(SystemParams, cfg["system"], "system")
    _violations("system", p.check_invariants())
    return p


def build_spiral(cfg: Dict) -> SpiralConfig:
    s = _build(SpiralConfig, cfg["spiral"], "spiral")
    _violations("spiral", s.check_invariants())
    return s


def build_problem(cfg: Dict) -> ProblemSpec:
    d = dict(cfg["problem"])
    try:
        d["variant"] = Variant(d["variant"])
    except ValueError as e:
        raise ConfigError(f"problem.variant: {e}") from e
    for name in ("tau_s_bounds", "tau_i_bounds", "tau_f_bounds", "t2_bounds"):
        if len(d[name]) != 2:
            raise ConfigError(f"problem.{name} must hold two numbers")
        d[name] = tuple(float(v) for v in d[name])
    d["spiral"] = build_spiral(cfg)
    spec = _build(ProblemSpec, d, "problem")
    _violations("problem", spec.check_invariants())
    return spec


def build_halo_settings(cfg: Dict) -> HaloSettings:
    return _build(HaloSettings, cfg["halo"], "halo")


def build_solver(cfg: Dict) -> SolverConfig:
    s = _build(SolverConfig, cfg["solver"], "solver")
    _violations("solver", s.check_invariants())
    return s


def build_generation(cfg: Dict) -> GenerationConfig:
    d = dict(cfg["generation"])
    try:
        d["alpha_mode"] = AlphaMode(d["alpha_mode"])
    except ValueError as e:
        raise ConfigError(f"generation.alpha_mode: {e}") from e
    d["alpha_grid"] = tuple(float(a) for a in d["alpha_grid"])
    g = _build(GenerationConfig, d, "generation")
    _violations("generation", g.check_invariants())
    return g


def build_train(cfg: Dict) -> TrainConfig:
    t = _build(TrainConfig, cfg["train"], "train")
    _violations("train", t.check_invariants())
    return t


def build_study(cfg: Dict) -> StudyConfig:
    d = dict(cfg["study"])
    for name in ("alphas", "methods", "training_alphas", "basin_grid"):
        d[name] = tuple(d[name])
    s = _build(StudyConfig, d, "study")
    _violations("study", s.check_invariants())
    return s


def validate(cfg: Dict):
    """Build every typed view once; raises ConfigError on the first invalid section"""
    build_system(cfg)
    build_problem(cfg)
    build_halo_settings(cfg)
    build_solver(cfg)
    build_generation(cfg)
    build_train(cfg)
    build_study(cfg)
    sampling = cfg["sampling"]
    if not 0.0 <= sampling["alpha"] <= 1.0:
        raise ConfigError("sampling.alpha must lie in [0, 1]")
    if sampling["n"] < 0:
        raise ConfigError("sampling.n must be non-negative")


def dump_defaults(path):
    with open(path, "w") as f:
        json.dump(DEFAULT_CONFIG, f, indent=2)
