"""Study configuration: presets, INI files, command-line flags and validation."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..flow import FlowConfig
from ..mi_surrogate import MiSurrogateConfig
from ..mine import MineConfig
from ..optloop import DEFAULT_K, VARIANTS, LoopConfig
from ..reco import RecoConfig

STUDIES = ("base", "transfer", "energy", "custom")
PROFILES = ("full", "desk")
PRESET_EVENTS = (700, 50, 5)
BASE_RANGE = (1.0, 20.0)
ENERGY_RANGE = (1.0, 100.0)

# nested model configs reachable as [section] key = value
SECTIONS = {"reco": RecoConfig, "flow": FlowConfig, "mine": MineConfig, "surrogate": MiSurrogateConfig}

# desk scale keeps the full networks and rates but trains them for fewer
# epochs; MINE additionally runs full batch on a narrower statistics network
DESK_EPOCH_SCALE = 0.25
DESK_MINE = {"width": 32, "epochs": 200, "batch_size": None}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class StudyConfig:
    study: str = "base"
    variant: str = "reco"
    layers: int = 1
    events: int = 700
    transfer: bool = True
    runs: int | None = None
    energy_range: tuple[float, float] | None = None
    iterations: int = 40
    candidates: int | None = None
    seed: int = 0
    profile: str = "full"
    out_dir: str = "results"
    loop: dict[str, Any] = field(default_factory=dict)
    models: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.study not in STUDIES:
            raise ConfigError("study.study", f"must be one of {STUDIES}, got {self.study!r}")
        if self.variant not in VARIANTS:
            raise ConfigError("study.variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.layers not in (1, 2, 3):
            raise ConfigError("study.layers", f"must be 1, 2 or 3, got {self.layers}")
        if self.profile not in PROFILES:
            raise ConfigError("study.profile", f"must be one of {PROFILES}, got {self.profile!r}")
        if self.events < 1:
            raise ConfigError("study.events", "must be >= 1")
        if self.variant == "mi" and self.events == 5:
            raise ConfigError("study.events", "5 events per candidate is only supported for reco")
        if self.study != "custom" and self.profile == "full" and self.events not in PRESET_EVENTS:
            raise ConfigError("study.events", f"preset studies use one of {PRESET_EVENTS} events")
        if self.runs is None:
            self.runs = 10 if self.events == 5 else 3
        if self.runs < 1:
            raise ConfigError("study.runs", "must be >= 1")
        expected = {"base": BASE_RANGE, "transfer": BASE_RANGE, "energy": ENERGY_RANGE}.get(self.study)
        if self.energy_range is None:
            self.energy_range = expected or BASE_RANGE
        self.energy_range = tuple(float(e) for e in self.energy_range)
        if expected is not None and self.energy_range != expected:
            raise ConfigError("study.energy_range",
                              f"{self.study} study requires {expected[0]:g}-{expected[1]:g} GeV")
        if self.iterations < 0:
            raise ConfigError("study.iterations", "must be >= 0")
        if self.candidates is None:
            self.candidates = DEFAULT_K[self.variant]
        for name in self.loop:
            if name not in _loop_fields():
                raise ConfigError(f"loop.{name}", "unknown key")
        for section, values in self.models.items():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section")
            names = {f.name for f in dataclasses.fields(SECTIONS[section])}
            for name in values:
                if name not in names:
                    raise ConfigError(f"{section}.{name}", "unknown key")

    @property
    def n_features(self) -> int:
        return 2 * self.layers

    def model_settings(self) -> dict[str, dict[str, Any]]:
        """Model overrides after applying the profile, explicit values winning."""
        out: dict[str, dict[str, Any]] = {}
        if self.profile == "desk":
            for name in ("reco", "flow"):
                stages = SECTIONS[name]().stages
                out[name] = {"stages": tuple((r, max(1, round(n * DESK_EPOCH_SCALE))) for r, n in stages)}
            out["mine"] = dict(DESK_MINE)
        for section, values in self.models.items():
            out.setdefault(section, {}).update(values)
        return out

    def loop_config(self, run: int = 0) -> LoopConfig:
        models = {name: SECTIONS[name](**values) for name, values in self.model_settings().items()}
        try:
            return LoopConfig(variant=self.variant, n_features=self.n_features, candidates=self.candidates,
                              events=self.events, iterations=self.iterations, energy_range=self.energy_range,
                              transfer=self.transfer, seed=self.seed + run, **models, **self.loop)
        except (TypeError, ValueError) as exc:
            raise ConfigError("loop", str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _loop_fields() -> dict[str, dataclasses.Field]:
    skip = {"variant", "n_features", "candidates", "events", "iterations", "energy_range", "transfer",
            "seed", "shower", *SECTIONS}
    return {f.name: f for f in dataclasses.fields(LoopConfig) if f.name not in skip}


# ------------------------------------------------------------------ parsing

_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def convert(text: str, type_name: str):
    """Convert ``text`` according to a dataclass annotation string."""
    t = text.strip()
    if "None" in type_name and t.lower() in ("none", ""):
        return None
    base = type_name.replace(" | None", "").strip()
    if base == "bool":
        return parse_bool(t)
    if base == "int":
        return int(t)
    if base == "float":
        return float(t)
    if base == "str":
        return t
    if base.startswith("tuple[tuple"):
        # learning-rate stages as "rate:epochs, rate:epochs"
        stages = []
        for part in t.split(","):
            rate, _, epochs = part.partition(":")
            stages.append((float(rate), int(epochs)))
        return tuple(stages)
    if base.startswith("tuple"):
        return tuple(float(p) for p in t.split(","))
    raise ValueError(f"unsupported field type {type_name}")


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


_STUDY_KEYS = {k: v for k, v in _field_types(StudyConfig).items() if k not in ("loop", "models")}


def _coerce(section: str, key: str, text: str, types: dict[str, str]):
    if key not in types:
        raise ConfigError(f"{section}.{key}", "unknown key")
    try:
        return convert(text, types[key])
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", f"expected {types[key]}: {exc}") from None


def read_ini(path: str | Path) -> dict[str, Any]:
    """Raw keyword arguments for ``StudyConfig`` from an INI file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(str(path), f"malformed file: {exc}") from None
    kwargs: dict[str, Any] = {"loop": {}, "models": {}}
    loop_types = {k: str(f.type) for k, f in _loop_fields().items()}
    for section in parser.sections():
        items = parser[section]
        if section == "study":
            for key, text in items.items():
                kwargs[key] = _coerce(section, key, text, _STUDY_KEYS)
        elif section == "loop":
            for key, text in items.items():
                kwargs["loop"][key] = _coerce(section, key, text, loop_types)
        elif section in SECTIONS:
            types = _field_types(SECTIONS[section])
            kwargs["models"][section] = {k: _coerce(section, k, v, types) for k, v in items.items()}
        else:
            raise ConfigError(section, "unknown section")
    return kwargs


def parse_config(path: str | Path | None = None, **flags) -> StudyConfig:
    """Resolve a study from an optional INI file plus flags; flags win.

    Flags set to ``None`` are treated as absent.
    """
    kwargs: dict[str, Any] = read_ini(path) if path is not None else {}
    for key, value in flags.items():
        if value is None:
            continue
        if key not in _STUDY_KEYS:
            raise ConfigError(f"study.{key}", "unknown key")
        kwargs[key] = value
    return StudyConfig(**kwargs)
