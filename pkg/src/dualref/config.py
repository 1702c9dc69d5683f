"""Flat key=value run configuration with typed validation and flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "out"
    k1: int = 2
    k2: int = 1
    proxies: int = 25
    seg_weight: float = 1.0
    lr: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 20
    episodes_per_epoch: int = 500
    milestones: tuple[int, ...] = (10, 15)
    seeds: tuple[int, ...] = (0,)
    fpr_limit: float = 0.3
    pro_thresholds: int = 200
    per_image_pixel_auroc: bool = False
    mask_value: float = -1e9
    score_fraction: float = 0.01

    def validate_paths(self, need_train: bool = False, need_test: bool = False) -> None:
        if need_train and not Path(self.train_manifest).is_file():
            raise ConfigError(f"train_manifest not found: {self.train_manifest!r}")
        if need_test and not Path(self.test_manifest).is_file():
            raise ConfigError(f"test_manifest not found: {self.test_manifest!r}")


_INT_TUPLE_KEYS = {"milestones", "seeds"}


def _parse_value(key: str, raw: str, target_type) -> object:
    raw = raw.strip()
    try:
        if key in _INT_TUPLE_KEYS:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if target_type is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse a key=value file; '#' starts a comment; unknown keys are errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, types[key]))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config override {key!r}")
        setattr(cfg, key, value)
    return cfg
