"""Configuration dataclasses, presets and the key=value config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 2048
    inner_lr: float = 0.1
    rope_base: float = 10000.0
    cache_capacity: int = 64
    alpha_max: float = 0.5
    gate_init: float = 0.01
    mlp_ratio: int = 4
    token_shift: bool = True
    ttt_norm: bool = False
    # surprisal filter
    percentile: float = 0.95
    ema_decay: float = 0.99
    chunk_size: int = 16
    chunk_factor: float = 0.8
    warmup_tokens: int = 32

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len", "cache_capacity", "chunk_size", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError(f"d_head={self.d_head} must be even for rotary embeddings")
        if not 0 < self.alpha_max <= 1:
            raise ConfigError(f"alpha_max must lie in (0, 1], got {self.alpha_max}")
        if not 0 < self.chunk_factor < 1:
            raise ConfigError(f"chunk_factor must lie in (0, 1), got {self.chunk_factor}")
        if not 0 < self.percentile < 1:
            raise ConfigError(f"percentile must lie in (0, 1), got {self.percentile}")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.inner_lr <= 0 or self.rope_base <= 0:
            raise ConfigError("inner_lr and rope_base must be positive")
        if self.warmup_tokens < 0:
            raise ConfigError("warmup_tokens must be non-negative")


@dataclass
class TrainConfig:
    total_steps: int = 2800
    stage2_start: int = 2000
    lr: float = 3e-4
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seq_len: int = 256
    needle_mix_fraction: float = 0.5
    seed: int = 0
    checkpoint_every: int = 500
    log_wall_time: bool = False

    def validate(self):
        if not 0 < self.stage2_start <= self.total_steps:
            raise ConfigError(
                f"stage2_start must satisfy 0 < stage2_start <= total_steps, got {self.stage2_start}/{self.total_steps}"
            )
        if self.lr <= 0 or self.grad_clip <= 0 or self.seq_len < 2:
            raise ConfigError("lr, grad_clip must be positive and seq_len >= 2")
        if not 0 <= self.needle_mix_fraction <= 1:
            raise ConfigError("needle_mix_fraction must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if self.checkpoint_every <= 0 or self.warmup_steps < 0:
            raise ConfigError("checkpoint_every must be positive, warmup_steps non-negative")


@dataclass
class EvalConfig:
    depths: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    n_samples: int = 30
    seed: int = 1_000_003
    extrapolation_factor: float = 2.0

    def validate(self):
        if not self.depths:
            raise ConfigError("depths must be non-empty")
        if any(not 0 <= d <= 1 for d in self.depths):
            raise ConfigError(f"depths must lie in [0, 1], got {self.depths}")
        if self.n_samples <= 0:
            raise ConfigError("n_samples must be positive")
        if self.extrapolation_factor < 1:
            raise ConfigError("extrapolation_factor must be >= 1")


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/desk"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.train.seq_len > self.model.max_seq_len:
            raise ConfigError("train.seq_len exceeds model.max_seq_len")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that shapes a training trajectory."""
        d = {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train)}
        d["train"].pop("checkpoint_every")
        d["train"].pop("log_wall_time")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def desk_preset() -> RunConfig:
    return RunConfig()


def paper_preset() -> RunConfig:
    """Reference scale: 4 layers, d_model 256, seq 2048, 10k steps split 7000/3000."""
    return RunConfig(
        preset="paper",
        model=ModelConfig(
            n_layers=4, d_model=256, n_heads=4, max_seq_len=4096, cache_capacity=256, chunk_size=64, warmup_tokens=128
        ),
        train=TrainConfig(total_steps=10_000, stage2_start=7_000, seq_len=2048, checkpoint_every=1000),
        out_dir="runs/paper",
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def from_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def _coerce(value: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return [float(v) for v in value.split(",") if v.strip()]
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(current).__name__}") from None


def apply_setting(cfg: RunConfig, key: str, value: str):
    """Apply one ``section.field=value`` (or top-level ``field=value``) setting."""
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in ("model", "train", "eval"):
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        target = getattr(cfg, section)
    else:
        target, name = cfg, key
    names = {f.name for f in fields(target)}
    if name not in names or name in ("model", "train", "eval"):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(value, getattr(target, name), key))


def load_config(path: str | os.PathLike | None = None, preset: str | None = None, overrides=()) -> RunConfig:
    """Build a validated RunConfig.

    File format: one ``key = value`` per line, ``#`` comments, keys qualified
    by section (``model.d_model = 64``). A ``preset`` key selects the base
    preset and must come first; ``overrides`` are ``key=value`` strings
    applied last.
    """
    lines: list[tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            env_dir = os.environ.get("SRTTT_CONFIG_DIR")
            alt = Path(env_dir) / p if env_dir else None
            if alt is not None and alt.is_file():
                p = alt
            else:
                raise FileNotFoundError(f"config file not found: {path}")
        for lineno, raw in enumerate(p.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            lines.append((k.strip(), v.strip()))
    file_preset = next((v for k, v in lines if k == "preset"), None)
    cfg = from_preset(preset or file_preset or "desk")
    for k, v in lines:
        if k != "preset":
            apply_setting(cfg, k, v)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must be key=value")
        k, v = ov.split("=", 1)
        apply_setting(cfg, k, v)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    out = [f"preset = {cfg.preset}", f"out_dir = {cfg.out_dir}"]
    for section in ("model", "train", "eval"):
        for f in fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            out.append(f"{section}.{f.name} = {v}")
    return "\n".join(out) + "\n"


def config_from_dict(d: dict) -> RunConfig:
    return RunConfig(
        preset=d["preset"],
        model=ModelConfig(**d["model"]),
        train=TrainConfig(**d["train"]),
        eval=EvalConfig(**d["eval"]),
        out_dir=d["out_dir"],
    )
