"""Toy multimodal decoder: forward/resume kernels, training and checkpoint files."""

from .checkpoint_io import (
    ArchMismatchError,
    CheckpointError,
    TruncatedCheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ArchConfig, ConfigError
from .forward import (
    CaptureFlags,
    LayerCheckpoint,
    MacCounter,
    NumericError,
    PrefillResult,
    advance,
    attention_scores,
    drop_visual,
    embed,
    forward_prefill,
    mask_visual,
    readout,
    resume_forward,
    resume_masked_batch,
)
from .model import ModelCheckpoint, init_params, tensor_shapes
from .sequence import MultimodalSequence, SequenceLengthError
from .train import TrainConfig, TrainingError, loss_and_grads, train

__all__ = [
    "ArchConfig", "ArchMismatchError", "CaptureFlags", "CheckpointError", "ConfigError",
    "LayerCheckpoint", "MacCounter", "ModelCheckpoint", "MultimodalSequence", "NumericError",
    "PrefillResult", "SequenceLengthError", "TrainConfig", "TrainingError",
    "TruncatedCheckpointError", "advance", "attention_scores", "drop_visual", "embed",
    "forward_prefill", "init_params", "load_checkpoint", "loss_and_grads", "mask_visual",
    "readout", "resume_forward", "resume_masked_batch", "save_checkpoint", "tensor_shapes", "train",
]
