"""Hyperparameters, their defaults, and flat key=value config files.

Precedence is command-line flag > config file > built-in default. A dataset
profile only fills ``beta_o`` and ``lr`` when neither source sets them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

PROFILES = {
    "flickr30k": {"beta_o": 0.3, "lr": 0.0002},
    "mscoco": {"beta_o": 0.0, "lr": 0.0005},
}


@dataclass
class Config:
    profile: str = "flickr30k"
    lambda1: float = 9.0
    lambda2: float = 4.0
    beta_w: float = 0.3
    beta_o: float = 0.3
    gamma: float = 0.2
    d: int = 10
    lr: float = 0.0002
    lr_decay_every: int = 10
    batch_size: int = 128
    h: int = 1024
    q: int = 300
    k: int = 36
    img_dim: int = 2048
    epochs: int = 20
    seed: int = 0
    objective: str = "word_oriented"
    clip_norm: float = 2.0
    use_rve: bool = True

    def validate(self) -> "Config":
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        for name in ("lambda1", "lambda2", "beta_w", "beta_o"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.objective not in ("word_oriented", "object_oriented", "ensemble"):
            raise ValueError(f"unknown objective {self.objective!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "Config":
        data = self.to_dict()
        data.update(changes)
        return Config(**data).validate()


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    if kind in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw.strip()


def read_config_file(path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def write_config_file(cfg: Config, path) -> None:
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(file_values: Optional[Mapping[str, Any]] = None, flag_values: Optional[Mapping[str, Any]] = None) -> Config:
    """Merge config-file values and command-line flags over the defaults."""
    merged: dict[str, Any] = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _TYPES:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    profile = merged.get("profile", Config.profile)
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    for key, value in PROFILES[profile].items():
        merged.setdefault(key, value)
    return Config(**merged).validate()
