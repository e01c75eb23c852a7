"""Run configuration: one JSON document, overridable by dotted-path flags.

`load_config(path, overrides)` reads defaults, applies the file, then applies
`key.path=value` strings (typed against the existing field).  Validation
failures raise ConfigError naming the offending field so the CLI can exit
with a config-specific status.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .masking import MaskWindow


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None     # load an existing corpus instead of generating
    per_action: int = 25
    seed: int = 7


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class WindowConfig:
    extract_until: int = 750
    apply_until: int = 250


@dataclass
class AdapterTrainConfig:
    epochs: int = 40
    batch: int = 32
    lr: float = 1e-3
    noise_max: float = 1.0
    attn_guide: float = 1.0
    seed: int = 1


@dataclass
class BackboneTrainConfig:
    epochs: int = 300
    batch: int = 32
    lr: float = 3e-4
    p_uncond: float = 0.1
    seed: int = 2


@dataclass
class ExtractorTrainConfig:
    epochs: int = 60
    batch: int = 32
    lr: float = 2e-3
    seed: int = 3


@dataclass
class CheckpointConfig:
    adapter: str = "adapter.ckpt"
    backbone: str = "backbone.ckpt"
    extractor: str = "extractor.ckpt"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    masking_enabled: bool = True
    branch_mode: str = "shared"
    x0_clamp: float = 4.0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    adapter: AdapterTrainConfig = field(default_factory=AdapterTrainConfig)
    backbone: BackboneTrainConfig = field(default_factory=BackboneTrainConfig)
    extractor: ExtractorTrainConfig = field(default_factory=ExtractorTrainConfig)
    checkpoints: CheckpointConfig = field(default_factory=CheckpointConfig)

    def validate(self) -> "RunConfig":
        if self.branch_mode not in ("shared", "independent"):
            raise ConfigError(f"branch_mode: expected shared|independent, got {self.branch_mode!r}")
        if self.schedule.steps < 2:
            raise ConfigError("schedule.steps: must be >= 2")
        try:
            MaskWindow(self.window.extract_until, self.window.apply_until, self.schedule.steps)
        except ValueError as e:
            raise ConfigError(f"window: {e}") from e
        if self.data.per_action < 1:
            raise ConfigError("data.per_action: must be >= 1")
        for section in ("adapter", "backbone", "extractor"):
            cfg = getattr(self, section)
            if cfg.epochs < 0:
                raise ConfigError(f"{section}.epochs: must be >= 0")
            if cfg.lr <= 0:
                raise ConfigError(f"{section}.lr: must be positive")
            if cfg.batch < 1:
                raise ConfigError(f"{section}.batch: must be >= 1")
        if self.x0_clamp <= 0:
            raise ConfigError("x0_clamp: must be positive")
        return self

    def mask_window(self) -> MaskWindow:
        return MaskWindow(self.window.extract_until, self.window.apply_until, self.schedule.steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, path="")


def _build(dc_type, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in raw:
            continue
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _SECTIONS
        ):
            section_type = _SECTIONS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build(section_type, raw[name], sub)
        else:
            kwargs[name] = _coerce(raw[name], getattr(dc_type(), name), sub)
    return dc_type(**kwargs)


_SECTIONS = {
    "DataConfig": DataConfig,
    "ScheduleConfig": ScheduleConfig,
    "WindowConfig": WindowConfig,
    "AdapterTrainConfig": AdapterTrainConfig,
    "BackboneTrainConfig": BackboneTrainConfig,
    "ExtractorTrainConfig": ExtractorTrainConfig,
    "CheckpointConfig": CheckpointConfig,
}


def _coerce(value, template, path: str):
    if template is None or value is None:
        return value
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            out = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
        return out
    if isinstance(template, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(template, str):
        return str(value)
    return value


def apply_override(cfg: RunConfig, spec: str) -> RunConfig:
    """Apply one ``dotted.path=value`` override, returning a new config."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like key.path=value")
    dotted, value = spec.split("=", 1)
    parts = dotted.strip().split(".")
    raw = cfg.to_dict()
    node = raw
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"{dotted}: unknown config section {p!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"{dotted}: unknown config field {leaf!r}")
    node[leaf] = value
    return RunConfig.from_dict(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        cfg = RunConfig.from_dict(raw)
    for spec in overrides:
        cfg = apply_override(cfg, spec)
    return cfg.validate()
