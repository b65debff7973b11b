"""Layer-wise visual-token information and the information horizon.

The information of visual token ``k`` at layer ``i`` is the label probability
when every other visual hidden state is zeroed after layer ``i``, minus the
label probability when all of them are zeroed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np

from .engine.config import ConfigError
from .engine.forward import CaptureFlags, LayerCheckpoint, forward_prefill, resume_masked_batch
from .engine.model import ModelCheckpoint
from .engine.sequence import MultimodalSequence


@dataclass
class InformationProfile:
    values: np.ndarray         # (n_layers + 1, n_visual)
    text_baseline: np.ndarray  # (n_layers + 1,)
    label: int
    full_prob: float           # label probability of the unmasked forward
    fingerprint: str
    sample_id: int | None = None

    @property
    def n_layers(self) -> int:
        return self.values.shape[0] - 1


@dataclass
class LayerStats:
    mean: np.ndarray
    variance: np.ndarray
    mean_abs: np.ndarray

    def __len__(self):
        return len(self.mean)


def sequence_fingerprint(seq: MultimodalSequence) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(seq.prefix_ids + [-1] + seq.question_ids + [seq.label]).tobytes())
    h.update(np.ascontiguousarray(seq.visual, dtype="<f8").tobytes())
    h.update(seq.position_ids.tobytes())
    return h.hexdigest()[:16]


def _check(ckpt, seq, layer):
    if seq.label >= ckpt.arch.vocab_size or seq.label < 0:
        raise ConfigError(f"label {seq.label} outside vocabulary of size {ckpt.arch.vocab_size}")
    if not 0 <= layer <= ckpt.arch.n_layers:
        raise ConfigError(f"layer {layer} outside [0, {ckpt.arch.n_layers}]")


def _layer_probs(ckpt, state: LayerCheckpoint, label: int) -> tuple[float, np.ndarray]:
    """``(p_text, p_k for every alive k)`` from one stacked resume.

    Row 0 of the stack is the all-zero mask, row ``k + 1`` keeps only token ``k``.
    Every caller goes through here so that values agree bit for bit.
    """
    n = state.n_alive
    masks = np.vstack([np.zeros((1, n)), np.eye(n)])
    probs = resume_masked_batch(ckpt, state, masks)[:, label].astype(np.float64)
    return float(probs[0]), probs[1:]


def _state_at(ckpt, seq, layer) -> LayerCheckpoint:
    return forward_prefill(ckpt, seq, CaptureFlags(layers=[layer])).checkpoints[layer]


def text_only_prob(ckpt: ModelCheckpoint, seq: MultimodalSequence, layer: int) -> float:
    """Label probability with every visual hidden state zeroed after ``layer``."""
    _check(ckpt, seq, layer)
    return _layer_probs(ckpt, _state_at(ckpt, seq, layer), seq.label)[0]


def token_information(ckpt: ModelCheckpoint, seq: MultimodalSequence, layer: int,
                      token: int) -> float:
    _check(ckpt, seq, layer)
    if not 0 <= token < seq.n_visual:
        raise ConfigError(f"visual token {token} outside [0, {seq.n_visual})")
    p_text, p_k = _layer_probs(ckpt, _state_at(ckpt, seq, layer), seq.label)
    return float(p_k[token] - p_text)


def information_profile(ckpt: ModelCheckpoint, seq: MultimodalSequence,
                        layers=None) -> InformationProfile:
    """All ``(layer, token)`` information values from one captured prefix forward.

    ``layers`` restricts the computed rows; the others are left as NaN.
    """
    depth = ckpt.arch.n_layers
    _check(ckpt, seq, 0)
    layers = range(depth + 1) if layers is None else sorted(set(layers))
    for i in layers:
        _check(ckpt, seq, i)
    full = forward_prefill(ckpt, seq, CaptureFlags(layers=layers))
    values = np.full((depth + 1, seq.n_visual), np.nan)
    baseline = np.full(depth + 1, np.nan)
    for i in layers:
        p_text, p_k = _layer_probs(ckpt, full.checkpoints[i], seq.label)
        baseline[i] = p_text
        values[i] = p_k - p_text
    return InformationProfile(values, baseline, seq.label, float(full.probs[seq.label]),
                              sequence_fingerprint(seq), seq.meta.get("sample_id"))


def profile_stats(profile: InformationProfile | np.ndarray) -> LayerStats:
    """Population mean / variance over visual tokens, per layer."""
    values = profile.values if isinstance(profile, InformationProfile) else np.asarray(profile)
    return LayerStats(values.mean(axis=1), values.var(axis=1), np.abs(values).mean(axis=1))


def aggregate_stats(profiles: list[InformationProfile]) -> LayerStats:
    """Average of per-sample statistics (each sample is profiled independently)."""
    per_sample = [profile_stats(p) for p in profiles]
    return LayerStats(
        np.mean([s.mean for s in per_sample], axis=0),
        np.mean([s.variance for s in per_sample], axis=0),
        np.mean([s.mean_abs for s in per_sample], axis=0),
    )


def detect_horizon(stats: LayerStats, tau: float = 1e-3, persistence: int = 2) -> int | None:
    """Smallest layer from which every later layer has ``|mean| <= tau`` and ``var <= tau**2``.

    The first ``persistence`` layers of the run must all qualify (clipped at the
    last layer), which the suffix condition already implies.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if persistence < 1:
        raise ConfigError("persistence must be >= 1")
    quiet = (np.abs(np.asarray(stats.mean)) <= tau) & (np.asarray(stats.variance) <= tau**2)
    last = len(quiet) - 1
    for i in range(len(quiet)):
        window = quiet[i:min(i + persistence - 1, last) + 1]
        if window.all() and quiet[i:].all():
            return i
    return None


def retained_information(profile: InformationProfile | np.ndarray, layer: int, kept,
                         clamp_negative: bool = False) -> float:
    """Sum of the layer's information over the kept tokens (signed unless clamped)."""
    values = profile.values if isinstance(profile, InformationProfile) else np.asarray(profile)
    row = values[layer]
    if clamp_negative:
        row = np.maximum(row, 0.0)
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(float(row[int(k)]) for k in kept)


def profiles_to_csv(profiles: list[InformationProfile]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "layer", "token_index", "information"])
    for n, p in enumerate(profiles):
        sid = p.sample_id if p.sample_id is not None else n
        for i in range(p.values.shape[0]):
            for k in range(p.values.shape[1]):
                w.writerow([sid, i, k, repr(float(p.values[i, k]))])
    return buf.getvalue()


def stats_to_csv(stats: LayerStats, text_baseline: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "mean", "variance", "p_text"])
    for i in range(len(stats.mean)):
        w.writerow([i, repr(float(stats.mean[i])), repr(float(stats.variance[i])),
                    repr(float(text_baseline[i]))])
    return buf.getvalue()
