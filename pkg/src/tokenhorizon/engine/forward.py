"""Prefill forward pass with layer-boundary checkpoints and resumable continuation.

Hidden states are stored row-major: one row per token, ``d`` columns.  A
:class:`LayerCheckpoint` at layer ``i`` holds the residual stream after the
first ``i`` decoder layers (``i = 0`` is the embedding output).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .config import ConfigError
from .model import ModelCheckpoint
from .sequence import MultimodalSequence


class NumericError(ArithmeticError):
    pass


class MacCounter:
    """Tallies multiply-accumulates of every matrix product it performs."""

    def __init__(self):
        self.macs = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a @ b
        # (..., n, k) @ (..., k, m): n*k*m MACs for each broadcast batch element
        self.macs += int(np.prod(out.shape)) * a.shape[-1]
        return out


@dataclass(frozen=True)
class CaptureFlags:
    layers: frozenset = frozenset()
    attention: frozenset = frozenset()

    def __init__(self, layers: Iterable[int] = (), attention: Iterable[int] = ()):
        object.__setattr__(self, "layers", frozenset(int(i) for i in layers))
        object.__setattr__(self, "attention", frozenset(int(i) for i in attention))

    @classmethod
    def everything(cls, n_layers: int) -> "CaptureFlags":
        return cls(range(n_layers + 1), range(1, n_layers + 1))


@dataclass
class LayerCheckpoint:
    layer_index: int
    hidden: np.ndarray
    n_prefix: int
    alive_visual: tuple[int, ...]
    position_ids: np.ndarray

    @property
    def n_alive(self) -> int:
        return len(self.alive_visual)

    @property
    def visual_slice(self) -> slice:
        return slice(self.n_prefix, self.n_prefix + self.n_alive)

    @property
    def hidden_visual(self) -> np.ndarray:
        return self.hidden[self.visual_slice]

    @property
    def hidden_text(self) -> np.ndarray:
        return np.concatenate(
            [self.hidden[: self.n_prefix], self.hidden[self.n_prefix + self.n_alive :]]
        )

    def copy(self) -> "LayerCheckpoint":
        return replace(self, hidden=self.hidden.copy(), position_ids=self.position_ids.copy())


@dataclass
class PrefillResult:
    probs: np.ndarray
    checkpoints: dict[int, LayerCheckpoint] = field(default_factory=dict)
    attention: dict[int, np.ndarray] = field(default_factory=dict)
    macs: int = 0
    final_state: LayerCheckpoint | None = None


def rms_norm(x, gain, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain, inv


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def silu(z):
    return z / (1.0 + np.exp(-z))


def block_forward(p, x, n_heads, eps, counter=None, keep_cache=False):
    """One pre-norm decoder block on a ``(nb, n, d)`` batch.

    Returns the new residual stream, the per-head attention probabilities
    ``(nb, H, n, n)`` and, if requested, the intermediates needed for backprop.
    """
    mm = counter.matmul if counter is not None else np.matmul
    nb, n, d = x.shape
    dh = d // n_heads

    h, inv1 = rms_norm(x, p["attn_norm"], eps)
    q = mm(h, p["wq"]).reshape(nb, n, n_heads, dh).transpose(0, 2, 1, 3)
    k = mm(h, p["wk"]).reshape(nb, n, n_heads, dh).transpose(0, 2, 1, 3)
    v = mm(h, p["wv"]).reshape(nb, n, n_heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(dh)
    scores = mm(q, k.transpose(0, 1, 3, 2)) * scale
    causal = np.tril(np.ones((n, n), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    attn = softmax(scores)
    mixed = mm(attn, v).transpose(0, 2, 1, 3).reshape(nb, n, d)
    x1 = x + mm(mixed, p["wo"])

    h2, inv2 = rms_norm(x1, p["mlp_norm"], eps)
    gate = mm(h2, p["w_gate"])
    up = mm(h2, p["w_up"])
    act = silu(gate)
    z = act * up
    out = x1 + mm(z, p["w_down"])

    cache = None
    if keep_cache:
        cache = dict(x=x, h=h, inv1=inv1, q=q, k=k, v=v, attn=attn, mixed=mixed,
                     x1=x1, h2=h2, inv2=inv2, gate=gate, up=up, act=act, z=z)
    return out, attn, cache


def embed(ckpt: ModelCheckpoint, seq: MultimodalSequence) -> LayerCheckpoint:
    """Layer-0 state: token / raw visual embeddings plus position embeddings."""
    arch = ckpt.arch
    seq.validate(arch)
    params = _compute_params(ckpt)
    tok = params["tok_emb"]
    dtype = arch.dtype
    rows = np.concatenate(
        [tok[seq.prefix_ids], seq.visual.astype(dtype), tok[seq.question_ids]]
    )
    hidden = rows + params["pos_emb"][seq.position_ids]
    return LayerCheckpoint(
        layer_index=0,
        hidden=hidden,
        n_prefix=len(seq.prefix_ids),
        alive_visual=tuple(range(seq.n_visual)),
        position_ids=seq.position_ids.copy(),
    )


def advance(ckpt, state, stop, capture=None, counter=None, checkpoints=None, attention=None):
    """Run decoder layers ``state.layer_index + 1 .. stop`` and return the new state."""
    arch = ckpt.arch
    if not 0 <= state.layer_index <= stop <= arch.n_layers:
        raise ConfigError(
            f"cannot advance from layer {state.layer_index} to {stop} (n_layers={arch.n_layers})"
        )
    params = _compute_params(ckpt)
    capture = capture or CaptureFlags()
    x = state.hidden[None]
    for j in range(state.layer_index + 1, stop + 1):
        x, attn, _ = block_forward(
            params[j - 1], x, arch.n_heads, arch.norm_epsilon, counter=counter
        )
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation after decoder layer {j}")
        if attention is not None and j in capture.attention:
            attention[j] = attn[0].mean(axis=0)
        if checkpoints is not None and j in capture.layers:
            checkpoints[j] = replace(state, layer_index=j, hidden=x[0].copy())
    return replace(state, layer_index=stop, hidden=x[0])


def readout(ckpt: ModelCheckpoint, state: LayerCheckpoint) -> np.ndarray:
    """Next-token distribution at the last text position."""
    params = _compute_params(ckpt)
    last, _ = rms_norm(state.hidden[-1], params["final_norm"], ckpt.arch.norm_epsilon)
    probs = softmax(last @ params["unembed"])
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite output distribution")
    return probs


def forward_prefill(ckpt: ModelCheckpoint, seq: MultimodalSequence,
                    capture: CaptureFlags | None = None) -> PrefillResult:
    """Full prefill; ``result.macs`` counts the decoder-layer matrix products."""
    capture = capture or CaptureFlags()
    state = embed(ckpt, seq)
    result = PrefillResult(probs=None)
    if 0 in capture.layers:
        result.checkpoints[0] = state.copy()
    counter = MacCounter()
    final = advance(ckpt, state, ckpt.arch.n_layers, capture, counter,
                    result.checkpoints, result.attention)
    result.probs = readout(ckpt, final)
    result.macs = counter.macs
    result.final_state = final
    return result


def mask_visual(state: LayerCheckpoint, mask) -> LayerCheckpoint:
    """Multiply visual hidden rows by a binary mask; masked rows stay in the sequence."""
    mask = np.asarray(mask)
    if mask.shape != (state.n_alive,):
        raise ConfigError(f"mask length {mask.shape} does not match {state.n_alive} alive tokens")
    hidden = state.hidden.copy()
    hidden[state.visual_slice] *= mask.astype(hidden.dtype)[:, None]
    return replace(state, hidden=hidden)


def drop_visual(state: LayerCheckpoint, keep) -> LayerCheckpoint:
    """Remove visual rows not in ``keep`` (original indices); position ids are preserved."""
    keep = set(int(k) for k in keep)
    unknown = keep.difference(state.alive_visual)
    if unknown:
        raise ConfigError(f"kept indices {sorted(unknown)} are not alive")
    rows = [r for r in range(state.hidden.shape[0])
            if not (state.n_prefix <= r < state.n_prefix + state.n_alive)
            or state.alive_visual[r - state.n_prefix] in keep]
    return LayerCheckpoint(
        layer_index=state.layer_index,
        hidden=state.hidden[rows],
        n_prefix=state.n_prefix,
        alive_visual=tuple(k for k in state.alive_visual if k in keep),
        position_ids=state.position_ids[rows],
    )


def resume_forward(ckpt: ModelCheckpoint, state: LayerCheckpoint, *, mask=None, keep=None,
                   capture: CaptureFlags | None = None) -> PrefillResult:
    """Continue a captured forward through the remaining layers.

    ``mask`` zeroes visual rows but keeps them attendable; ``keep`` drops every
    other visual row entirely.  With neither, the uninterrupted forward is
    reproduced exactly.
    """
    if not 0 <= state.layer_index <= ckpt.arch.n_layers:
        raise ConfigError(f"layer_index {state.layer_index} out of range")
    if mask is not None and keep is not None:
        raise ConfigError("pass either mask or keep, not both")
    if mask is not None:
        state = mask_visual(state, mask)
    elif keep is not None:
        state = drop_visual(state, keep)
    result = PrefillResult(probs=None)
    counter = MacCounter()
    final = advance(ckpt, state, ckpt.arch.n_layers, capture, counter,
                    result.checkpoints, result.attention)
    result.probs = readout(ckpt, final)
    result.macs = counter.macs
    result.final_state = final
    return result


def resume_masked_batch(ckpt: ModelCheckpoint, state: LayerCheckpoint, masks) -> np.ndarray:
    """Output distributions for a stack of visual masks applied to one state.

    ``masks`` is ``(nb, n_alive)``; row ``b`` of the result equals
    ``resume_forward(ckpt, state, mask=masks[b]).probs``.
    """
    masks = np.asarray(masks)
    if masks.ndim != 2 or masks.shape[1] != state.n_alive:
        raise ConfigError(f"masks must be (nb, {state.n_alive}), got {masks.shape}")
    arch = ckpt.arch
    params = _compute_params(ckpt)
    x = np.repeat(state.hidden[None], masks.shape[0], axis=0)
    x[:, state.visual_slice] *= masks.astype(x.dtype)[:, :, None]
    for j in range(state.layer_index + 1, arch.n_layers + 1):
        x, _, _ = block_forward(params[j - 1], x, arch.n_heads, arch.norm_epsilon)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation after decoder layer {j}")
    last, _ = rms_norm(x[:, -1], params["final_norm"], arch.norm_epsilon)
    probs = softmax(last @ params["unembed"])
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite output distribution")
    return probs


def attention_scores(ckpt: ModelCheckpoint, seq: MultimodalSequence, layer: int) -> np.ndarray:
    """Head-averaged post-softmax attention of decoder layer ``layer`` (1-based)."""
    if not 1 <= layer <= ckpt.arch.n_layers:
        raise ConfigError(f"layer must be in [1, {ckpt.arch.n_layers}], got {layer}")
    attention = {}
    state = embed(ckpt, seq)
    advance(ckpt, state, layer, CaptureFlags(attention=[layer]), attention=attention)
    return attention[layer]


def _compute_params(ckpt: ModelCheckpoint):
    """Weights cast to the compute dtype, grouped per layer (cached on the checkpoint)."""
    cached = ckpt.__dict__.get("_compute_cache")
    if cached is None:
        dtype = ckpt.arch.dtype
        flat = {k: np.asarray(v, dtype=dtype) for k, v in ckpt.params.items()}
        cached = {k: flat[k] for k in ("tok_emb", "pos_emb", "final_norm", "unembed")}
        for j in range(ckpt.arch.n_layers):
            cached[j] = {name: flat[f"layers.{j}.{name}"] for name in
                         ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")}
        object.__setattr__(ckpt, "_compute_cache", cached)
    return cached
