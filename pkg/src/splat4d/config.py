"""Engine configuration: defaults, key=value file parsing, CLI overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class Config:
    # point budget and loss weights
    n_ini: int = 50_000
    lambda_p: float = 1.0
    lambda_d: float = 0.1
    lambda_f: float = 0.01
    lambda_i: float = 50.0
    # learning rates and iteration schedule
    lr_gauss: float = 4e-3
    lr_cam: float = 1e-3
    iters_first: int = 500
    iters_cam: int = 150
    iters_gauss: int = 300
    densify_steps_first: tuple = (150, 300)
    densify_steps: tuple = (100, 200)
    # thresholds
    err_threshold: float = 0.01
    epipolar_threshold: float = 0.01
    fb_threshold: float = 1.0
    # initialization; scale_gain multiplies the texture-odds scale rule,
    # whose odds factor is clamped to [1e-4, 1e2]: on-screen footprint is
    # roughly odds * scale_gain pixels, so the default starts low-texture
    # splats near half a pixel and lets the optimizer grow them
    opacity_init: float = 0.99
    scale_gain: float = 5.0e3
    # ingest
    target_short_side: int = 480
    normalize_scene: bool = True
    # engine behavior
    background: tuple = (0.0, 0.0, 0.0)
    depth_coverage: float = 0.5
    constant_velocity: bool = False
    prune_floor: float = 0.0
    save_debug: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_ini", "iters_first", "iters_cam", "iters_gauss",
                     "target_short_side"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("err_threshold", "epipolar_threshold", "fb_threshold",
                     "lr_gauss", "lr_cam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lambda_p", "lambda_d", "lambda_f", "lambda_i"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.densify_steps_first = tuple(int(s) for s in self.densify_steps_first)
        self.densify_steps = tuple(int(s) for s in self.densify_steps)
        self.background = tuple(float(c) for c in self.background)
        if len(self.background) != 3:
            raise ValueError("background must have 3 components")


def _parse_value(text: str, kind):
    text = text.strip()
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is tuple:
        if not text:
            return ()
        return tuple(float(p) if "." in p or "e" in p.lower() else int(p)
                     for p in text.split(","))
    return text


def parse_config_text(text: str, base: Config | None = None) -> Config:
    """Parse flat key=value lines ('#' starts a comment) over defaults."""
    values = dataclasses.asdict(base) if base else {}
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    kinds = {f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(val, kinds[key])
    return Config(**values)


def load_config(path) -> Config:
    return parse_config_text(Path(path).read_text())


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    """Return a copy of cfg with the given non-None field overrides applied."""
    values = dataclasses.asdict(cfg)
    kinds = {f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in values:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(val, str):
            val = _parse_value(val, kinds[key])
        values[key] = val
    return Config(**values)


def save_config(path, cfg: Config) -> None:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(Config)]
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(val):
    if isinstance(val, tuple):
        return ",".join(repr(v) for v in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val)


def thread_count() -> int:
    """Worker threads for internal parallelism; GFLOW_THREADS=0 or unset
    means single-threaded deterministic mode (results are bit-identical
    either way; threads only affect wall time)."""
    try:
        return max(0, int(os.environ.get("GFLOW_THREADS", "0")))
    except ValueError:
        return 0
