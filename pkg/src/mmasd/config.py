"""Flat ``key = value`` run configuration with dotted keys.

Every field of the tracker, flow, model, training and synthetic-data configs
is addressable as ``section.field`` (``train.lr``, ``vivit.tubelet``). A bare
field name is accepted when it is unique across sections (``lr``). Layering is
defaults < config file < command-line overrides.
"""

from __future__ import annotations

import dataclasses
import difflib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from mmasd.errors import ConfigurationError
from mmasd.flow import FlowConfig
from mmasd.model import Cnn3dConfig, FusionConfig, LstmConfig, ModelConfig, ViViTConfig
from mmasd.pipeline import SynthConfig, TrainConfig
from mmasd.tracking import TrackerConfig

PRESETS = ("full", "micro")

SECTIONS: dict[str, type] = {
    "tracker": TrackerConfig,
    "flow": FlowConfig,
    "vivit": ViViTConfig,
    "cnn": Cnn3dConfig,
    "lstm": LstmConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}
# keys that live outside the dataclasses
EXTRA = {"model.preset": "micro", "model.n_actions": 11, "split.ratio": 0.8, "split.seed": 0}


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _base_values(preset: str) -> dict[str, object]:
    """All canonical keys with their default values under ``preset``."""
    model = ModelConfig.micro() if preset == "micro" else ModelConfig()
    instances = {"vivit": model.vivit, "cnn": model.cnn, "lstm": model.lstm, "fusion": model.fusion}
    out: dict[str, object] = {}
    for sec, cls in SECTIONS.items():
        inst = instances.get(sec) or cls()
        for f in dataclasses.fields(cls):
            out[f"{sec}.{f.name}"] = getattr(inst, f.name)
    out.update(EXTRA)
    out["model.preset"] = preset
    return out


def _types() -> dict[str, object]:
    t: dict[str, object] = {}
    for sec, cls in SECTIONS.items():
        for name, hint in _field_types(cls).items():
            t[f"{sec}.{name}"] = hint
    t.update({"model.preset": str, "model.n_actions": int, "split.ratio": float, "split.seed": int})
    return t


KEY_TYPES = _types()


def _bare_index() -> dict[str, list[str]]:
    idx: dict[str, list[str]] = {}
    for key in KEY_TYPES:
        idx.setdefault(key.split(".", 1)[1], []).append(key)
    return idx


BARE = _bare_index()


def canonical_key(key: str) -> str:
    key = key.strip()
    if key in KEY_TYPES:
        return key
    if key in BARE:
        if len(BARE[key]) == 1:
            return BARE[key][0]
        raise ConfigurationError(f"config key {key!r} is ambiguous; use one of {', '.join(BARE[key])}")
    options = list(KEY_TYPES) + [b for b, full in BARE.items() if len(full) == 1]
    close = difflib.get_close_matches(key, options, n=1, cutoff=0.6)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise ConfigurationError(f"unknown config key {key!r}{hint}")


def _type_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def coerce(key: str, raw: str):
    """Parse ``raw`` as the declared type of ``key``."""
    hint = KEY_TYPES[key]
    text = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if hint is tuple or origin is tuple:
            parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
            args = [a for a in typing.get_args(hint) if a is not Ellipsis]
            elem = args[0] if args else (float if any("." in p or "e" in p.lower() for p in parts) else int)
            return tuple(elem(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"config key {key!r} expects {_type_name(hint)}, got {raw.strip()!r}") from None
    raise ConfigurationError(f"config key {key!r} has unsupported type {_type_name(hint)}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``canonical key -> string value`` pairs; later lines override earlier ones."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}: line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            out[canonical_key(key)] = value.strip()
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}: line {lineno}: {exc}") from None
    return out


def parse_overrides(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        out[canonical_key(key)] = value.strip()
    return out


@dataclass
class RunConfig:
    """Fully resolved settings for one command invocation."""

    command: str = ""
    values: dict = field(default_factory=lambda: _base_values("micro"))
    paths: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[canonical_key(key)]

    def _section(self, sec: str, cls):
        return cls(**{f.name: self.values[f"{sec}.{f.name}"] for f in dataclasses.fields(cls)})

    def tracker(self) -> TrackerConfig:
        return self._section("tracker", TrackerConfig)

    def flow(self) -> FlowConfig:
        return self._section("flow", FlowConfig)

    def train(self) -> TrainConfig:
        return self._section("train", TrainConfig)

    def synth(self) -> SynthConfig:
        return self._section("synth", SynthConfig)

    def model(self) -> ModelConfig:
        return ModelConfig(vivit=self._section("vivit", ViViTConfig), cnn=self._section("cnn", Cnn3dConfig),
                           lstm=self._section("lstm", LstmConfig), fusion=self._section("fusion", FusionConfig),
                           n_actions=self.values["model.n_actions"])

    def validate(self) -> "RunConfig":
        """Build every section once so invalid combinations fail before any work starts."""
        self.tracker(), self.flow(), self.train(), self.synth(), self.model()
        if not 0 < self.values["split.ratio"] < 1:
            raise ConfigurationError("split.ratio must lie in (0, 1)")
        return self

    def dump(self) -> str:
        lines = [f"# resolved configuration for '{self.command}'"]
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ", ".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.txt"
        path.write_text(self.dump())
        return path


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None,
            command: str = "") -> RunConfig:
    """Layer defaults < file < overrides. The model preset is resolved first since it sets the defaults."""
    raw = dict(file_values or {})
    raw.update(overrides or {})
    preset = raw.get("model.preset", "micro").strip()
    if preset not in PRESETS:
        raise ConfigurationError(f"config key 'model.preset' expects one of {PRESETS}, got {preset!r}")
    values = _base_values(preset)
    for key, text in raw.items():
        values[key] = coerce(key, text)
    return RunConfig(command, values).validate()


def load_config(path=None, overrides: dict[str, str] | None = None, command: str = "") -> RunConfig:
    file_values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    return resolve(file_values, overrides, command)
