"""Run configuration with JSON round-tripping and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    tau: int = 64
    n_frames: int = 128
    K: int = 8
    fps: float = 25.0
    sample_rate: int = 50000
    image_size: int = 64
    seed: int = 0
    lambda_fm: float = 10.0
    lambda_pct: float = 10.0
    lambda_w: float = 10.0
    motion_epochs: int = 2000
    expression_epochs: int = 300
    generator_steps: int = 3000
    generator_batch: int = 1
    lr: float = 2e-4
    gate_mode: str = "stack"
    save_every: int = 0
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("tau", "n_frames", "K", "sample_rate", "image_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.tau < self.K:
            raise ConfigError(f"tau ({self.tau}) must be at least K ({self.K})")
        if self.n_frames <= self.tau:
            raise ConfigError(f"n_frames ({self.n_frames}) must exceed tau ({self.tau})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)
