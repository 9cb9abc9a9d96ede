"""Run configuration: flat key-value file with sections, overridden by CLI flags."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields

_SECTIONS = {
    "scene": ("scene_seed",),
    "field": ("repr", "resolution", "channels", "hidden", "n_classes", "r_max",
              "depth", "plane_std", "density_bias", "phi_wrap", "epsilon"),
    "render": ("width", "height", "n_samples", "pitch"),
    "fit": ("phases", "rays", "lr", "w_rgb", "w_mask", "w_parsing", "checkpoint_every"),
    "run": ("seed", "threads", "deterministic"),
}


@dataclass
class RunConfig:
    scene_seed: int = 0
    repr: str = "dual-sphere"
    resolution: int = 96
    channels: int = 16
    hidden: int = 64
    n_classes: int = 4
    r_max: float = 0.5
    depth: int = 3
    plane_std: float = 0.05
    density_bias: float = -4.0
    phi_wrap: bool = False
    epsilon: float = 1e-8
    width: int = 64
    height: int = 64
    n_samples: int = 32
    pitch: float = 0.1
    phases: str = "0/0/100:2000"
    rays: int = 1024
    lr: float = 5e-3
    w_rgb: float = 1.0
    w_mask: float = 0.5
    w_parsing: float = 0.25
    checkpoint_every: int = 0
    seed: int = 0
    threads: int = 0
    deterministic: bool = False

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file not found or unreadable: {path}")
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for section, keys in _SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in keys:
                    raise ValueError(f"unknown config key [{section}] {key}")
                kind = types[key]
                if kind == "bool":
                    setattr(cfg, key, parser[section].getboolean(key))
                elif kind == "int":
                    setattr(cfg, key, parser[section].getint(key))
                elif kind == "float":
                    setattr(cfg, key, parser[section].getfloat(key))
                else:
                    setattr(cfg, key, parser[section][key])
        return cfg

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ValueError(f"unknown config override {key!r}")
            setattr(self, key, value)
        return self

    def validate(self) -> None:
        from .field import FIELD_KINDS

        if self.repr not in FIELD_KINDS:
            raise ValueError(f"unknown representation {self.repr!r}")
        if self.resolution < 2 or self.channels < 1:
            raise ValueError("plane resolution/channels out of range")
        if self.width < 1 or self.height < 1 or self.n_samples < 2:
            raise ValueError("render dimensions out of range")
        if self.rays < 1 or self.lr <= 0:
            raise ValueError("fit settings out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
