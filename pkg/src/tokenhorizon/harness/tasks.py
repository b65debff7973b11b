"""Synthetic colour-grid question answering with two levels of visual complexity.

``lookup`` asks for the colour of one cell, so the answer lives in a single
visual token.  ``majority`` asks for the most frequent colour, a global
property spread over the whole grid.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..engine.config import ConfigError
from ..engine.sequence import MultimodalSequence
from ..engine.train import Batch

KINDS = ("lookup", "majority")
DATA_MAGIC = b"TKHZDATA"
DATA_VERSION = 1
ENCODER_SEED = 20240917


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    grid_side: int = 4
    n_colors: int = 4
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.grid_side < 1 or self.n_colors < 2 or self.n_samples < 0:
            raise ConfigError("grid_side >= 1, n_colors >= 2 and n_samples >= 0 required")


@dataclass(frozen=True)
class Vocab:
    grid_side: int
    n_colors: int

    @property
    def bos(self) -> int:
        return self.n_colors

    @property
    def q_lookup(self) -> int:
        return self.n_colors + 1

    @property
    def q_majority(self) -> int:
        return self.n_colors + 2

    @property
    def fill(self) -> int:
        return self.n_colors + 3

    @property
    def answer(self) -> int:
        return self.n_colors + 4

    def row(self, r: int) -> int:
        return self.n_colors + 5 + r

    def col(self, c: int) -> int:
        return self.n_colors + 5 + self.grid_side + c

    @property
    def size(self) -> int:
        return self.n_colors + 5 + 2 * self.grid_side

    def question(self, kind: str, r: int = -1, c: int = -1) -> list[int]:
        if kind == "lookup":
            return [self.q_lookup, self.row(r), self.col(c), self.answer]
        return [self.q_majority, self.fill, self.fill, self.answer]


class GridEncoder:
    """Fixed random 'projector': cell embedding = colour code + 0.5 * position code."""

    def __init__(self, width: int, grid_side: int, n_colors: int, seed: int = ENCODER_SEED):
        self.width, self.grid_side, self.n_colors, self.seed = width, grid_side, n_colors, seed
        rng = np.random.default_rng(seed)
        self.color_code = _unit_rows(rng.normal(size=(n_colors, width)))
        self.pos_code = _unit_rows(rng.normal(size=(grid_side * grid_side, width)))

    def encode(self, grids: np.ndarray) -> np.ndarray:
        """``(..., side, side)`` colour ids -> ``(..., side*side, d)`` visual embeddings."""
        flat = grids.reshape(grids.shape[:-2] + (-1,))
        return self.color_code[flat] + 0.5 * self.pos_code


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


class TaskDataset:
    """Raw grids/questions/labels; sequences are materialised on demand for one width."""

    def __init__(self, kinds, grids, rows, cols, labels, grid_side, n_colors, width,
                 encoder_seed=ENCODER_SEED, seed=0):
        self.kinds = np.asarray(kinds, dtype=np.uint8)
        self.grids = np.asarray(grids, dtype=np.uint8).reshape(-1, grid_side, grid_side)
        self.rows = np.asarray(rows, dtype=np.int16)
        self.cols = np.asarray(cols, dtype=np.int16)
        self.labels = np.asarray(labels, dtype=np.int16)
        self.grid_side, self.n_colors, self.width = grid_side, n_colors, width
        self.encoder_seed, self.seed = encoder_seed, seed
        self.vocab = Vocab(grid_side, n_colors)
        self.encoder = GridEncoder(width, grid_side, n_colors, encoder_seed)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_visual(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def seq_len(self) -> int:
        return 1 + self.n_visual + 4

    def kind(self, i: int) -> str:
        return KINDS[self.kinds[i]]

    def __getitem__(self, i: int) -> MultimodalSequence:
        i = int(i)
        return MultimodalSequence(
            prefix_ids=[self.vocab.bos],
            visual=self.encoder.encode(self.grids[i]),
            question_ids=self.vocab.question(self.kind(i), int(self.rows[i]), int(self.cols[i])),
            label=int(self.labels[i]),
            meta={"sample_id": i, "kind": self.kind(i)},
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def collate(self, indices) -> Batch:
        indices = np.asarray(indices)
        v = self.vocab
        q = np.empty((len(indices), 4), dtype=np.int64)
        for out, i in enumerate(indices):
            q[out] = v.question(self.kind(i), int(self.rows[i]), int(self.cols[i]))
        ids = np.concatenate(
            [np.full((len(indices), 1), v.bos), np.full((len(indices), self.n_visual), -1), q], axis=1
        )
        return Batch(
            token_ids=ids,
            visual=self.encoder.encode(self.grids[indices]),
            positions=np.broadcast_to(np.arange(self.seq_len), ids.shape),
            labels=self.labels[indices].astype(np.int64),
            n_prefix=1,
        )

    def subset(self, indices) -> "TaskDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return TaskDataset(self.kinds[indices], self.grids[indices], self.rows[indices],
                           self.cols[indices], self.labels[indices], self.grid_side,
                           self.n_colors, self.width, self.encoder_seed, self.seed)

    def keys(self) -> list[bytes]:
        """Hashable identity of each sample (kind, grid, question)."""
        return [bytes([self.kinds[i]]) + self.grids[i].tobytes()
                + struct.pack("<hh", self.rows[i], self.cols[i]) for i in range(len(self))]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.kinds, self.grids, self.rows, self.cols, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.width}:{self.encoder_seed}".encode())
        return h.hexdigest()[:16]

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = json.dumps(dict(
            kinds=list(KINDS), grid_side=self.grid_side, n_colors=self.n_colors,
            width=self.width, encoder_seed=self.encoder_seed, seed=self.seed, n=len(self),
        ), sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(a).astype(dt).tobytes() for a, dt in (
            (self.kinds, "u1"), (self.grids, "u1"), (self.rows, "<i2"),
            (self.cols, "<i2"), (self.labels, "<i2")))
        return DATA_MAGIC + struct.pack("<II", DATA_VERSION, len(header)) + header + body

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TaskDataset":
        if data[:8] != DATA_MAGIC:
            raise ConfigError("not a dataset file")
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != DATA_VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        meta = json.loads(data[16:16 + hlen])
        n, g = meta["n"], meta["grid_side"]
        offset = 16 + hlen
        arrays = []
        for count, dt in ((n, "u1"), (n * g * g, "u1"), (n, "<i2"), (n, "<i2"), (n, "<i2")):
            size = count * np.dtype(dt).itemsize
            if len(data) < offset + size:
                raise ConfigError("dataset file truncated")
            arrays.append(np.frombuffer(data, dtype=dt, count=count, offset=offset))
            offset += size
        return cls(*arrays, grid_side=g, n_colors=meta["n_colors"], width=meta["width"],
                   encoder_seed=meta["encoder_seed"], seed=meta["seed"])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TaskDataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def majority_label(grid: np.ndarray, n_colors: int) -> int:
    counts = np.bincount(grid.ravel(), minlength=n_colors)
    return int(np.argmax(counts))


def gen_task(spec: TaskSpec, width: int, encoder_seed: int = ENCODER_SEED) -> TaskDataset:
    """Deterministic samples for ``spec``; majority grids are redrawn until the mode is unique."""
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    side, colors, n = spec.grid_side, spec.n_colors, spec.n_samples
    grids = rng.integers(0, colors, size=(n, side, side), dtype=np.uint8)
    if spec.kind == "lookup":
        rows = rng.integers(0, side, size=n)
        cols = rng.integers(0, side, size=n)
        labels = grids[np.arange(n), rows, cols]
    else:
        rows = cols = np.full(n, -1)
        for i in range(n):
            while True:
                counts = np.bincount(grids[i].ravel(), minlength=colors)
                if np.sum(counts == counts.max()) == 1:
                    break
                grids[i] = rng.integers(0, colors, size=(side, side), dtype=np.uint8)
        labels = np.array([majority_label(g, colors) for g in grids], dtype=np.int64)
    kinds = np.full(n, KINDS.index(spec.kind))
    return TaskDataset(kinds, grids, rows, cols, labels, side, colors, width, encoder_seed, spec.seed)


def concat(datasets: list[TaskDataset]) -> TaskDataset:
    first = datasets[0]
    for ds in datasets[1:]:
        if (ds.grid_side, ds.n_colors, ds.width, ds.encoder_seed) != (
                first.grid_side, first.n_colors, first.width, first.encoder_seed):
            raise ConfigError("datasets disagree on grid, colours, width or encoder")
    return TaskDataset(
        np.concatenate([d.kinds for d in datasets]), np.concatenate([d.grids for d in datasets]),
        np.concatenate([d.rows for d in datasets]), np.concatenate([d.cols for d in datasets]),
        np.concatenate([d.labels for d in datasets]), first.grid_side, first.n_colors,
        first.width, first.encoder_seed, first.seed,
    )


def exclude(dataset: TaskDataset, held_out: TaskDataset) -> TaskDataset:
    """Drop samples of ``dataset`` that also occur in ``held_out``."""
    banned = set(held_out.keys())
    keep = [i for i, key in enumerate(dataset.keys()) if key not in banned]
    return dataset.subset(keep)
