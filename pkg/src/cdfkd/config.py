"""Flat key=value run configuration.

One file drives a whole run: dataset generation sizes, the two training
phases, loss weights, and the component flags the ablation grid toggles.
Unknown keys are a hard parse error so a typo cannot silently fall back to
a default, and every run writes the fully resolved configuration back out;
re-running from that dump reproduces the run bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "dump_config", "format_config"]


class ConfigError(ValueError):
    """Configuration file violates the format or a field constraint."""


@dataclass
class RunConfig:
    seed: int = 7
    data_dir: str = "data"
    out_dir: str = "runs/cdfkd"
    image_size: int = 96
    train_scenes: int = 1500
    test_scenes: int = 300
    teacher_epochs: int = 20
    distill_epochs: int = 10
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    corrupt_down: bool = True
    downscale: bool = True
    l_global: bool = True
    l_instance: bool = True
    roi_out: int = 7
    roi_samples: int = 2
    min_feature_box: float = 0.25
    score_thresh: float = 0.05
    nms_iou: float = 0.5

    def validate(self) -> "RunConfig":
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.lr > 0, "lr must be positive"),
            (self.momentum >= 0, "momentum must be >= 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.image_size >= 32, "image_size must be >= 32"),
            (self.train_scenes >= 1, "train_scenes must be >= 1"),
            (self.test_scenes >= 1, "test_scenes must be >= 1"),
            (self.teacher_epochs >= 0, "teacher_epochs must be >= 0"),
            (self.distill_epochs >= 0, "distill_epochs must be >= 0"),
            (self.roi_out >= 1, "roi_out must be >= 1"),
            (self.roi_samples >= 1, "roi_samples must be >= 1"),
            (self.min_feature_box > 0, "min_feature_box must be positive"),
            (0 <= self.score_thresh <= 1, "score_thresh must be in [0,1]"),
            (0 <= self.nms_iou <= 1, "nms_iou must be in [0,1]"),
            (self.seed >= 0, "seed must be a non-negative integer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"invalid configuration: {msg}")
        return self


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str, where: str):
    kind = _FIELDS[key]
    if kind == "bool":
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{where}: key '{key}' expects true or false, got '{raw}'")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: key '{key}' expects {kind}, got '{raw}'") from None
    return raw


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values = dataclasses.asdict(base) if base is not None else {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{where}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key '{key}'")
        seen.add(key)
        values[key] = _coerce(key, raw, where)
    return RunConfig(**values).validate()


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), source=str(path), base=base)


def format_config(cfg: RunConfig) -> str:
    """Resolved dump: every field, declaration order, reparseable."""
    lines = ["# resolved configuration"]
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
