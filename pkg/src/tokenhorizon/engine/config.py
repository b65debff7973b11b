"""Architecture description shared by the engine, the estimator and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}


class ConfigError(ValueError):
    """Invalid architecture, schedule or experiment configuration."""


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int
    width: int
    n_heads: int
    mlp_width: int
    vocab_size: int
    max_seq_len: int
    precision_mode: str = "single"
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "width", "n_heads", "mlp_width", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.width % self.n_heads:
            raise ConfigError(f"width {self.width} is not divisible by n_heads {self.n_heads}")
        if self.precision_mode not in PRECISIONS:
            raise ConfigError(f"precision_mode must be one of {sorted(PRECISIONS)}")
        if not self.norm_epsilon > 0:
            raise ConfigError("norm_epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    @property
    def dtype(self):
        return PRECISIONS[self.precision_mode]

    def with_precision(self, precision_mode: str) -> "ArchConfig":
        return ArchConfig(**{**asdict(self), "precision_mode": precision_mode})

    def to_header(self) -> str:
        """Canonical, key-sorted text form used in checkpoint headers."""
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_header(cls, text: str) -> "ArchConfig":
        try:
            fields = json.loads(text)
            return cls(**fields)
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable architecture header: {exc}") from exc
