"""Experiment configuration: versioned key-value text, strict about typos.

Unknown keys are errors (a silently ignored misspelling would invalidate an
experiment). The config hash is computed over sorted key=value pairs, so it
is stable under field reordering in the file.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields

from .errors import ConfigError

CONFIG_HEADER = "texsplat-config"
CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    scene: str = "sphere-blob"
    seed: int = 0
    views: int = 8
    render_size: int = 64
    num_splats: int = 48
    tau: int = 0
    prompt: str = "solid-green"           # deliberately coarse target caption
    patch: str = "checker-green"          # vocabulary name or image file path
    acquire_mode: str = "crop-paste"
    candidate_index: int = -1             # -1: embedder-based default selection
    num_candidates: int = 4
    w_text: float = 4.0
    w_consistency: float = 2.5
    w_token: float = 2.0
    lam: float = 0.25
    ref_weight_reference: float = 0.35
    ref_weight_previous: float = 0.65
    ref_weight_flipped: float = 0.15
    symmetric: bool = False
    propagate: bool = True
    subtrahend_mode: str = "token-isolating"
    edit_jitter: float = 0.5
    kappa_ref: int = 10
    kappa_other: int = 25
    t_max: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    outer_iterations: int = 2
    finetune_iterations: int = 120
    finetune_step: float = 0.5
    tune_steps: int = 400
    tune_lr: float = 0.05
    tune_c_clip: float = 0.1              # diff-dominant mix; see notes
    tune_c_diff: float = 1.0
    train_steps: int = 1200
    train_batch: int = 4
    train_lr: float = 2e-3
    train_seed: int = 1234
    train_texture_size: int = 32
    denoiser_weights: str = ""            # load instead of training when set
    output_dir: str = "runs/out"

    def validate(self) -> None:
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        if not (0 <= self.tau < self.views):
            raise ConfigError(f"tau {self.tau} outside view range")
        if self.render_size % 4:
            raise ConfigError("render_size must be a multiple of 4")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError("lambda must lie in [0,1]")
        if self.kappa_ref >= self.kappa_other:
            raise ConfigError("kappa_ref must be < kappa_other")
        if self.kappa_other > self.t_max:
            raise ConfigError("kappa_other must be <= t_max")
        if self.outer_iterations < 0:
            raise ConfigError("outer_iterations must be >= 0")
        if self.acquire_mode not in ("crop-paste", "generative"):
            raise ConfigError(f"unknown acquire_mode {self.acquire_mode!r}")
        if self.subtrahend_mode not in ("token-isolating", "literal"):
            raise ConfigError(f"unknown subtrahend_mode {self.subtrahend_mode!r}")
        for name in ("w_text", "w_consistency", "w_token", "edit_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.denoiser_weights and not os.path.exists(self.denoiser_weights):
            raise ConfigError(f"denoiser_weights file not found: {self.denoiser_weights}")
        if self.patch and ("/" in self.patch or self.patch.endswith(".ppm")):
            if not os.path.exists(self.patch):
                raise ConfigError(f"texture patch file not found: {self.patch}")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if ftype == "int":
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"bad integer for {name}: {raw!r}") from e
    if ftype == "float":
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"bad number for {name}: {raw!r}") from e
    return raw


def parse_config(text: str) -> ExperimentConfig:
    lines = text.splitlines()
    start = 0
    while start < len(lines) and (not lines[start].strip()
                                  or lines[start].lstrip().startswith("#")):
        start += 1
    if start >= len(lines):
        raise ConfigError("empty config")
    header = lines[start].split()
    if len(header) != 2 or header[0] != CONFIG_HEADER:
        raise ConfigError(f"missing config header line, got {lines[start]!r}")
    if int(header[1]) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {header[1]}")
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(lines[start + 1:], start=start + 2):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key == "lambda":
            key = "lam"
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, key, _parse_value(key, value))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [f"{CONFIG_HEADER} {CONFIG_VERSION}"]
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        name = "lambda" if f.name == "lam" else f.name
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    items = sorted(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(ExperimentConfig))
    return hashlib.sha256("\n".join(items).encode()).hexdigest()
