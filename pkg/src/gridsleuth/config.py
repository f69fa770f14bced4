"""Scenario configuration files.

A scenario is one JSON document (schema version 1)::

    {
      "version": 1,
      "feeder": "builtin:ieee13",          # or a path to a .feeder file
      "allocation": "builtin:table1",      # or a path to a .alloc file
      "seeds": {"households": 0, "noise": 0, "slack": 0},
      "noise": {"magnitude_std": 0.0, "angle_std": 0.0},
      "K_total": 600,
      "power_factor": 0.95,
      "slack_variation": 0.0,
      "events": [{"slot": 50, "kind": "line_trip", "target": "L684_611"}],
      "identification": {"tau": 1e-6, "first_slot": 1, "K": 500},
      "detector": {"alpha": 0.01, "gamma": "auto", "calibration_slots": 1000,
                   "safety_factor": 1.5},
      "localization": {"K": 10, "guard": 1},
      "output_dir": "out"
    }

Every key except ``version`` has the default shown above (``events`` defaults
to an empty list and ``identification.K`` to the whole stream).  Relative
paths resolve against the config file's directory.  The config hash is the
SHA-256 of the canonical JSON of the resolved settings plus the text of the
feeder and allocation they reference.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError, GridSleuthError
from .feeder import FeederModel, builtin_text, load_feeder
from .loads import HouseholdModel, LoadAllocation, load_allocation
from .simulator import NoiseModel, ScenarioEvent

SCHEMA_VERSION = 1
BUILTIN_FEEDERS = {"builtin:ieee13": "ieee13.feeder", "builtin:two_bus": "two_bus.feeder"}
BUILTIN_ALLOCATIONS = {"builtin:table1": "table1.alloc"}

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "feeder": "builtin:ieee13",
    "allocation": "builtin:table1",
    "seeds": {"households": 0, "noise": 0, "slack": 0},
    "noise": {"magnitude_std": 0.0, "angle_std": 0.0},
    "K_total": 600,
    "power_factor": 0.95,
    "slack_variation": 0.0,
    "events": [],
    "identification": {"tau": 1e-6, "first_slot": 1, "K": None},
    "detector": {"alpha": 0.01, "gamma": "auto", "calibration_slots": 1000, "safety_factor": 1.5},
    "localization": {"K": 10, "guard": 1},
    "output_dir": "out",
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _read_source(ref: str, builtins: dict, root: Path) -> str:
    if ref in builtins:
        return builtin_text(builtins[ref])
    path = Path(ref)
    if not path.is_absolute():
        path = root / path
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {ref!r}: {exc}") from exc


@dataclass
class ScenarioConfig:
    settings: dict
    feeder_text: str
    allocation_text: str
    root: Path

    # ---------------------------------------------------------------- views
    @property
    def feeder(self) -> FeederModel:
        return load_feeder(self.feeder_text)

    @property
    def allocation(self) -> LoadAllocation:
        return load_allocation(self.allocation_text)

    @property
    def household(self) -> HouseholdModel:
        return HouseholdModel(seed=int(self.settings["seeds"]["households"]))

    @property
    def noise(self) -> NoiseModel:
        n = self.settings["noise"]
        return NoiseModel(float(n["magnitude_std"]), float(n["angle_std"]),
                          int(self.settings["seeds"]["noise"]))

    @property
    def events(self) -> list[ScenarioEvent]:
        return [ScenarioEvent(int(e["slot"]), e["kind"], str(e["target"]),
                              dict(e.get("parameters", {})))
                for e in self.settings["events"]]

    @property
    def K_total(self) -> int:
        return int(self.settings["K_total"])

    @property
    def output_dir(self) -> Path:
        p = Path(self.settings["output_dir"])
        return p if p.is_absolute() else self.root / p

    @property
    def config_hash(self) -> str:
        doc = {"settings": self.settings, "feeder": self.feeder_text,
               "allocation": self.allocation_text}
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def scenario_kwargs(self) -> dict:
        s = self.settings
        return dict(noise=self.noise, events=self.events, K=self.K_total,
                    household=self.household, power_factor=float(s["power_factor"]),
                    slack_variation=float(s["slack_variation"]),
                    slack_seed=int(s["seeds"]["slack"]))


def _validate(cfg: ScenarioConfig) -> None:
    s = cfg.settings
    if s["version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {s['version']!r}")
    checks = [
        (s["K_total"], lambda v: isinstance(v, int) and v >= 1, "K_total must be an integer >= 1"),
        (s["identification"]["tau"], lambda v: v > 0, "identification.tau must be > 0"),
        (s["detector"]["alpha"], lambda v: 0 < v < 1, "detector.alpha must lie in (0, 1)"),
        (s["localization"]["K"], lambda v: isinstance(v, int) and v >= 1,
         "localization.K must be an integer >= 1"),
        (s["localization"]["guard"], lambda v: isinstance(v, int) and v >= 0,
         "localization.guard must be an integer >= 0"),
        (s["detector"]["calibration_slots"], lambda v: isinstance(v, int) and v >= 1000,
         "detector.calibration_slots must be an integer >= 1000"),
        (s["power_factor"], lambda v: 0 < v <= 1, "power_factor must lie in (0, 1]"),
        (s["slack_variation"], lambda v: v >= 0, "slack_variation must be >= 0"),
    ]
    for value, ok, msg in checks:
        try:
            good = ok(value)
        except TypeError:
            good = False
        if not good:
            raise ConfigError(f"{msg} (got {value!r})")
    gamma = s["detector"]["gamma"]
    if gamma != "auto" and not (isinstance(gamma, (int, float)) and gamma > 0):
        raise ConfigError(f"detector.gamma must be 'auto' or a positive number (got {gamma!r})")
    K_id = s["identification"]["K"]
    if K_id is not None and not (isinstance(K_id, int) and K_id >= 1):
        raise ConfigError("identification.K must be an integer >= 1 or null")
    try:
        f = cfg.feeder
        alloc = cfg.allocation
        alloc.validate_against(f, excluded=())
        cfg.noise
        for ev in cfg.events:
            if ev.kind in ("line_trip", "line_close"):
                f.line(ev.target)
            elif ev.target not in {b.bus_id for b in f.buses}:
                raise ConfigError(f"event targets unknown bus {ev.target!r}")
    except KeyError as exc:
        raise ConfigError(f"event references unknown element {exc}") from None
    except GridSleuthError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    slots = [e.slot for e in cfg.events]
    if slots != sorted(slots):
        raise ConfigError("events must be sorted by slot")


def from_dict(doc: dict, root: Path = Path("."), seed_override: Optional[int] = None) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "version" not in doc:
        raise ConfigError("config lacks 'version'")
    settings = _merge(DEFAULTS, doc)
    if seed_override is not None:
        settings["seeds"] = {k: int(seed_override) for k in settings["seeds"]}
    cfg = ScenarioConfig(
        settings,
        _read_source(settings["feeder"], BUILTIN_FEEDERS, root),
        _read_source(settings["allocation"], BUILTIN_ALLOCATIONS, root),
        root,
    )
    _validate(cfg)
    return cfg


def load_config(path, seed_override: Optional[int] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(doc, path.resolve().parent, seed_override)
