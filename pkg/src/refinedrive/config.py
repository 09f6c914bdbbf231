"""Configuration dataclasses, INI-style config files and dotted-key overrides."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class SimConfig:
    dt: float = 0.5
    a_max: float = 3.0
    v_max: float = 10.0
    delta_max: float = 0.6
    wheelbase: float = 2.7
    ego_length: float = 4.5
    ego_width: float = 2.0
    lane_half_width: float = 2.0
    reward_progress: float = 1.0
    penalty_collision: float = 50.0
    penalty_red_light: float = 20.0
    reward_jerk: float = 0.1
    blocked_timeout: float = 20.0
    blocked_speed: float = 0.1
    deviation_distance: float = 5.0
    # scenario mix (events per 100 m of route)
    jaywalker_rate: float = 1.0
    sudden_brake_rate: float = 0.5
    lead_vehicle_prob: float = 0.6
    parked_rate: float = 1.0
    light_prob: float = 0.7
    green_time: float = 12.0
    red_time: float = 6.0
    route_min_length: float = 120.0
    route_max_length: float = 200.0


@dataclass
class ModelConfig:
    # paper-scale widths; the desk profile shrinks them
    hidden: int = 256
    img_channels: int = 64
    lidar_channels: int = 64
    teacher_channels: int = 64
    n_cls: int = 8
    c_in: int = 8
    img_h: int = 64
    img_w: int = 128
    depth_bins: int = 24
    depth_min: float = 1.0
    depth_max: float = 32.0
    horizon: int = 4
    n_layers: int = 2
    n_points: int = 4
    action_channels: int = 16
    use_look: bool = True
    use_predict: bool = True
    use_tf: bool = True
    two_frames: bool = True
    detach_seg_scatter: bool = False


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-7
    batch_size: int = 32
    epochs: int = 30
    grad_clip_l2: float = 35.0
    seed: int = 0
    color_jitter: float = 0.1
    crop_margin: int = 4
    aug_stop_epoch: int = -1  # -1: last 10% of epochs run without augmentation
    val_fraction: float = 0.1
    loss_weights: dict = field(default_factory=dict)  # empty entries are auto-calibrated

    def resolved_aug_stop(self) -> int:
        if self.aug_stop_epoch >= 0:
            return self.aug_stop_epoch
        return self.epochs - max(1, round(0.1 * self.epochs))


@dataclass
class DataConfig:
    n_frames: int = 20000
    n_routes: int = 100
    seed: int = 0
    teacher_frames: int = 4000
    teacher_epochs: int = 20
    teacher_lr: float = 1e-3
    teacher_threshold: float = 0.1


@dataclass
class EvalConfig:
    n_routes: int = 10
    repeats: int = 3
    seed: int = 1000
    max_steps: int = 400


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def override(self, key: str, value: str) -> None:
        """Apply a ``section.key=value`` override, coercing to the field type."""
        section, _, name = key.partition(".")
        if not name:
            raise KeyError(f"override key must be dotted (section.key): {key!r}")
        if section == "train" and name.startswith("loss_weights."):
            self.train.loss_weights[name.split(".", 1)[1]] = float(value)
            return
        target = getattr(self, section, None)
        if target is None or not dataclasses.is_dataclass(target):
            raise KeyError(f"unknown config section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(getattr(target, name), value))


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, dict):
        return json.loads(raw)
    return raw


def desk_profile() -> Config:
    """Narrow widths that keep one training run within CPU budget."""
    cfg = Config()
    cfg.model.hidden = 32
    cfg.model.img_channels = 16
    cfg.model.lidar_channels = 16
    cfg.train.lr = 1e-3
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] = (), profile: str = "desk") -> Config:
    """Build a config from a profile, an optional INI file, then dotted overrides.

    The file format is plain INI: ``[train]`` sections with ``key = value`` lines.
    """
    cfg = desk_profile() if profile == "desk" else Config()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.override(f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        cfg.override(key.strip(), value.strip())
    return cfg


def write_config(cfg: Config, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {}
        for key, value in values.items():
            if isinstance(value, dict):
                for k, v in value.items():
                    parser[section][f"{key}.{k}"] = repr(v)
            else:
                parser[section][key] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


def config_from_dict(d: dict) -> Config:
    return Config(
        sim=SimConfig(**d.get("sim", {})),
        model=ModelConfig(**d.get("model", {})),
        train=TrainConfig(**d.get("train", {})),
        data=DataConfig(**d.get("data", {})),
        eval=EvalConfig(**d.get("eval", {})),
    )
