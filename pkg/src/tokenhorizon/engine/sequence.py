from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ArchConfig, ConfigError


class SequenceLengthError(ConfigError):
    pass


@dataclass
class MultimodalSequence:
    """A prompt laid out as ``prefix | visual block | question``.

    ``visual`` holds one row per visual token (``n_visual x width``); token ids index the
    model vocabulary.  ``label`` is the ground-truth first answer token and the
    prediction is read at the last question position.
    """

    prefix_ids: list[int]
    visual: np.ndarray
    question_ids: list[int]
    label: int
    position_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prefix_ids = [int(t) for t in self.prefix_ids]
        self.question_ids = [int(t) for t in self.question_ids]
        self.visual = np.asarray(self.visual)
        if self.position_ids is None:
            self.position_ids = np.arange(len(self), dtype=np.int64)
        else:
            self.position_ids = np.asarray(self.position_ids, dtype=np.int64)

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def n_text(self) -> int:
        return len(self.prefix_ids) + len(self.question_ids)

    def __len__(self) -> int:
        return len(self.prefix_ids) + self.visual.shape[0] + len(self.question_ids)

    def validate(self, arch: ArchConfig) -> None:
        if self.visual.ndim != 2 or self.visual.shape[1] != arch.width:
            raise ConfigError(
                f"visual block must be n_visual x {arch.width}, got {self.visual.shape}"
            )
        if self.n_visual < 1:
            raise ConfigError("sequence needs at least one visual token")
        if not self.question_ids:
            raise ConfigError("sequence needs at least one question token")
        if len(self) > arch.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {len(self)} exceeds max_seq_len {arch.max_seq_len}"
            )
        ids = self.prefix_ids + self.question_ids + [self.label]
        if min(ids) < 0 or max(ids) >= arch.vocab_size:
            raise ConfigError(f"token id outside vocabulary of size {arch.vocab_size}")
        pos = self.position_ids
        if pos.shape != (len(self),) or np.any(np.diff(pos) <= 0) or pos[0] < 0:
            raise ConfigError("position_ids must be nonnegative and strictly increasing")
        if pos[-1] >= arch.max_seq_len:
            raise SequenceLengthError(f"position id {pos[-1]} beyond max_seq_len")
        if not np.all(np.isfinite(self.visual)):
            raise ConfigError("visual embeddings contain non-finite values")
