"""Toy-model presets and the training recipe shared by every experiment."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..engine.checkpoint_io import load_checkpoint, save_checkpoint
from ..engine.config import ArchConfig, ConfigError
from ..engine.model import ModelCheckpoint, init_params
from ..engine.train import TrainConfig, batch_forward, train
from .tasks import KINDS, TaskDataset, TaskSpec, Vocab, concat, exclude, gen_task

MAX_SEQ_LEN = 32

# (layers, width, heads); MLP width is twice the model width
MODEL_PRESETS = {
    "small": (4, 32, 4),
    "base": (6, 64, 4),
    "large": (8, 96, 4),
}

HELD_OUT_SEED = 99   # held-out data seeds are offset from this; training sets exclude them


def preset_arch(name: str, grid_side: int = 4, n_colors: int = 4,
                precision: str = "single") -> ArchConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    layers, width, heads = MODEL_PRESETS[name]
    return ArchConfig(layers, width, heads, 2 * width, Vocab(n_colors, grid_side).size,
                      MAX_SEQ_LEN, precision)


@dataclass(frozen=True)
class TrainRecipe:
    preset: str = "base"
    tasks: tuple[str, ...] = KINDS
    grid_side: int = 4
    n_colors: int = 4
    n_train: int = 8000          # per task
    steps: int = 4000
    lr: float = 3e-3
    batch: int = 32
    optimizer: str = "adam"
    clip_norm: float = 1.0
    warmup: int = 100
    decay: str = "cosine"
    precision: str = "single"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for t in self.tasks:
            if t not in KINDS:
                raise ConfigError(f"unknown task {t!r}; choose from {KINDS}")
        if self.steps < 1:
            raise ConfigError("no training requested (steps must be >= 1)")

    def arch(self) -> ArchConfig:
        return preset_arch(self.preset, self.grid_side, self.n_colors, self.precision)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.steps, self.lr, self.batch, seed, self.optimizer,
                           clip_norm=self.clip_norm, warmup=self.warmup, decay=self.decay)

    def with_(self, **changes) -> "TrainRecipe":
        return replace(self, **changes)


def held_out(kind: str, n: int, width: int, grid_side: int = 4, n_colors: int = 4,
             seed: int = 0) -> TaskDataset:
    """Evaluation split; disjoint from every training set built by :func:`training_set`."""
    return gen_task(TaskSpec(kind, grid_side, n_colors, n, HELD_OUT_SEED + 1000 * seed), width)


def training_set(recipe: TrainRecipe, seed: int) -> TaskDataset:
    width = recipe.arch().width
    parts = []
    for kind in recipe.tasks:
        ds = gen_task(TaskSpec(kind, recipe.grid_side, recipe.n_colors, recipe.n_train,
                               seed + 1), width)
        parts.append(exclude(ds, held_out(kind, 1000, width, recipe.grid_side, recipe.n_colors)))
    return concat(parts)


def train_model(recipe: TrainRecipe, seed: int = 0, log_every: int = 0
                ) -> tuple[ModelCheckpoint, list[float]]:
    """Initialise with ``seed`` and train on the recipe's mixed-task data."""
    arch = recipe.arch()
    ckpt = init_params(arch, seed)
    return train(ckpt, training_set(recipe, seed), recipe.train_config(seed), log_every)


def accuracy(ckpt: ModelCheckpoint, dataset: TaskDataset, chunk: int = 256) -> float:
    """First-token argmax accuracy, batched over the dataset."""
    hits = 0
    for lo in range(0, len(dataset), chunk):
        idx = np.arange(lo, min(lo + chunk, len(dataset)))
        probs, _ = batch_forward(ckpt, dataset.collate(idx))
        hits += int(np.sum(probs.argmax(axis=1) == dataset.labels[idx]))
    return hits / len(dataset)


def _source_key() -> str:
    """Hash of the modules that determine trained weights."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for rel in ("engine/forward.py", "engine/model.py", "engine/train.py", "engine/config.py",
                "harness/tasks.py", "harness/recipes.py"):
        h.update((root / rel).read_bytes())
    return h.hexdigest()[:12]


def cached_model(recipe: TrainRecipe, seed: int, cache_dir) -> ModelCheckpoint:
    """:func:`train_model`, memoised on disk by recipe, seed and source hash.

    Training is deterministic, so a cache hit is the same checkpoint a fresh
    run would produce (weights are stored as float32).
    """
    key = hashlib.sha256(repr((recipe, seed, _source_key())).encode()).hexdigest()[:16]
    path = os.path.join(cache_dir, f"{recipe.preset}-seed{seed}-{key}.ckpt")
    if os.path.exists(path):
        return load_checkpoint(path)
    ckpt, _ = train_model(recipe, seed)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp"
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)
    return load_checkpoint(path)
