"""
Run configuration: one JSON document, validated before any work.

Nested sections map onto the dataclasses below. Unknown keys anywhere in
the document are rejected with :class:`ConfigError`. ``overrides`` take
dotted keys (``"schedule.iters_total"``) so command-line flags can patch
single values.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class Schedule:
    iters_stage1: int = 500
    iters_track_warmup_end: int = 1500
    iters_total: int = 4000

    def validate(self):
        if not 0 < self.iters_stage1 < self.iters_track_warmup_end < self.iters_total:
            raise ConfigError(
                "schedule needs 0 < iters_stage1 < iters_track_warmup_end < iters_total, got "
                f"{self.iters_stage1} / {self.iters_track_warmup_end} / {self.iters_total}"
            )

    def stage(self, it: int) -> int:
        """1 before ``iters_stage1``, 2 afterwards."""
        return 1 if it < self.iters_stage1 else 2

    def in_warmup(self, it: int) -> bool:
        return self.iters_stage1 <= it < self.iters_track_warmup_end


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    color: float = 2.5e-3
    pose: float = 1e-3
    field: float = 8e-4
    field_final: float = 1.6e-6


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


@dataclass
class Densify:
    enabled: bool = True
    interval: int = 100
    start: int = 100
    stop_fraction: float = 0.75
    grad_threshold: float = 0.02
    opacity_floor: float = 0.005
    percent_dense: float = 0.01
    max_gaussians: int = 6000
    min_count: int = 16
    static: bool = True
    dynamic: bool = True


@dataclass
class Ablation:
    """Component switches; all ``True`` is the full pipeline."""

    track_loss: bool = True
    object_deblur: bool = True
    camera_deblur: bool = True
    static_field: bool = True


@dataclass
class FieldConfig:
    depth: int = 4
    width: int = 64
    pos_freqs: int = 10
    time_freqs: int = 6


@dataclass
class InitConfig:
    static_stride: int = 2
    static_voxel: float = 1.0
    static_scale_factor: float = 0.7
    static_opacity: float = 0.8
    dynamic_scale_factor: float = 0.7
    dynamic_opacity: float = 0.8
    delta_sigma: float = 1e-4
    delta_mode: str = "neighbors"


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    virtual_views: int = 10
    lambda_track: float = 1.0
    track_frames: str = "current"
    optimize_poses_stage2: bool = False
    ssim_weight: float = 0.0
    t_min: float = 1e-4
    checkpoint_every: int = 0
    log_every: int = 10
    eval_max_shift: int = 5
    schedule: Schedule = field(default_factory=Schedule)
    lr: LearningRates = field(default_factory=LearningRates)
    adam: Adam = field(default_factory=Adam)
    densify: Densify = field(default_factory=Densify)
    ablation: Ablation = field(default_factory=Ablation)
    field_net: FieldConfig = field(default_factory=FieldConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def validate(self) -> "TrainConfig":
        self.schedule.validate()
        if not 2 <= self.virtual_views <= 32:
            raise ConfigError(f"virtual_views must be in [2, 32], got {self.virtual_views}")
        if self.lambda_track < 0:
            raise ConfigError("lambda_track must be non-negative")
        if self.densify.interval < 1:
            raise ConfigError("densify.interval must be positive")
        if self.field_net.depth < 1 or self.field_net.width < 1:
            raise ConfigError("field_net depth and width must be positive")
        if self.init.delta_mode not in ("neighbors", "random"):
            raise ConfigError(f"init.delta_mode must be 'neighbors' or 'random', got {self.init.delta_mode!r}")
        if self.track_frames not in ("current", "all"):
            raise ConfigError(f"track_frames must be 'current' or 'all', got {self.track_frames!r}")
        if self.t_min <= 0 or self.t_min >= 1:
            raise ConfigError("t_min must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "").validate()


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        typ = hints[name]
        key = prefix + name
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, value, key + ".")
        else:
            kwargs[name] = _coerce(typ, value, key)
    return cls(**kwargs)


def _coerce(typ, value, key):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def apply_overrides(d: dict, overrides: dict) -> dict:
    """Return a deep copy of ``d`` with dotted-key ``overrides`` applied."""
    out = json.loads(json.dumps(d))
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a config file; a relative ``dataset`` in the file resolves against the
    file's directory, one given in ``overrides`` against the working directory."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if isinstance(raw.get("dataset"), str) and raw["dataset"] and not Path(raw["dataset"]).is_absolute():
        raw["dataset"] = str((Path(path).parent / raw["dataset"]).resolve())
    overrides = dict(overrides or {})
    if isinstance(overrides.get("dataset"), str) and overrides["dataset"]:
        overrides["dataset"] = str(Path(overrides["dataset"]).resolve())
    if overrides:
        raw = apply_overrides(raw, overrides)
    return TrainConfig.from_dict(raw)


ABLATIONS = {
    "full": {},
    "wo_tl": {"ablation.track_loss": False, "lambda_track": 0.0},
    "wo_db": {"ablation.object_deblur": False},
    "wo_sd": {"ablation.camera_deblur": False},
    "wo_sdf": {"ablation.static_field": False},
    "baseline": {"ablation.camera_deblur": False, "ablation.object_deblur": False},
    "views_2": {"virtual_views": 2},
}


def ablation_overrides(name: str) -> dict:
    """Overrides for a named variant; accepts spellings like ``w/o-TL`` or ``wo_tl``."""
    key = name.strip().lower().replace("w/o", "wo").replace("-", "_").replace(" ", "_")
    if key not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return dict(ABLATIONS[key])
