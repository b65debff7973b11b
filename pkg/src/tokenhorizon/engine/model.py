"""Parameter container for the toy decoder and its canonical tensor order."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import ArchConfig

LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


def tensor_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape in the fixed order used by checkpoint files."""
    d, m = arch.width, arch.mlp_width
    shapes = {
        "tok_emb": (arch.vocab_size, d),
        "pos_emb": (arch.max_seq_len, d),
    }
    per_layer = {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "mlp_norm": (d,),
        "w_gate": (d, m),
        "w_up": (d, m),
        "w_down": (m, d),
    }
    for layer in range(arch.n_layers):
        for name in LAYER_TENSORS:
            shapes[f"layers.{layer}.{name}"] = per_layer[name]
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, arch.vocab_size)
    return shapes


@dataclass(frozen=True)
class ModelCheckpoint:
    arch: ArchConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.arch)
        if list(self.params) != list(expected):
            missing = set(expected) ^ set(self.params)
            if missing:
                raise ValueError(f"parameter set mismatch: {sorted(missing)[:5]}")
            object.__setattr__(self, "params", {k: self.params[k] for k in expected})
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {self.params[name].shape}")

    def layer(self, index: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{index}."
        return {name: self.params[prefix + name] for name in LAYER_TENSORS}

    def cast(self, dtype) -> "ModelCheckpoint":
        return ModelCheckpoint(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def replace(self, **tensors: np.ndarray) -> "ModelCheckpoint":
        params = dict(self.params)
        for name, value in tensors.items():
            params[name.replace("__", ".")] = value
        return ModelCheckpoint(self.arch, params)

    def fingerprint(self) -> str:
        """Short content hash of the float32 weights and the architecture."""
        h = hashlib.sha256(self.arch.to_header().encode())
        for value in self.params.values():
            h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def init_params(arch: ArchConfig, seed: int = 0) -> ModelCheckpoint:
    """Scaled-normal initialisation; norms start at one.

    Output projections are shrunk by ``1/sqrt(2 * n_layers)`` so the residual stream
    stays O(1) at initialisation.
    """
    rng = np.random.default_rng(seed)
    d = arch.width
    resid_scale = 1.0 / np.sqrt(2 * arch.n_layers)
    params = {}
    for name, shape in tensor_shapes(arch).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("norm"):
            params[name] = np.ones(shape)
        elif short in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape)
        else:
            fan_in = shape[0]
            std = 1.0 / np.sqrt(fan_in)
            if short in ("wo", "w_down"):
                std *= resid_scale
            params[name] = rng.normal(0.0, std, size=shape)
    return ModelCheckpoint(arch, params)
