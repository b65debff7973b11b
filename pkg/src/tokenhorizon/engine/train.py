"""Exact-gradient training of the toy decoder on first-answer-token cross-entropy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .forward import block_forward, rms_norm, softmax
from .model import LAYER_TENSORS, ModelCheckpoint
from .sequence import MultimodalSequence

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float
    batch: int = 32
    seed: int = 0
    optimizer: str = "sgd"      # "sgd" or "adam"
    momentum: float = 0.0
    clip_norm: float | None = None
    warmup: int = 0
    decay: str = "constant"     # "constant" or "cosine" (to zero at the last step)


def _lr_at(config: TrainConfig, step: int) -> float:
    lr = config.lr * min(1.0, step / config.warmup) if config.warmup else config.lr
    if config.decay == "cosine":
        lr *= 0.5 * (1.0 + math.cos(math.pi * (step - 1) / config.steps))
    return lr


@dataclass
class Batch:
    token_ids: np.ndarray   # (nb, n); -1 marks visual slots
    visual: np.ndarray      # (nb, n_visual, d)
    positions: np.ndarray   # (nb, n)
    labels: np.ndarray      # (nb,)
    n_prefix: int

    @property
    def n_visual(self) -> int:
        return self.visual.shape[1]


def collate(seqs: list[MultimodalSequence]) -> Batch:
    first = seqs[0]
    layout = (len(first.prefix_ids), first.n_visual, len(first.question_ids))
    ids, vis, pos = [], [], []
    for s in seqs:
        if (len(s.prefix_ids), s.n_visual, len(s.question_ids)) != layout:
            raise ConfigError("all sequences in a batch must share one layout")
        ids.append(s.prefix_ids + [-1] * s.n_visual + s.question_ids)
        vis.append(s.visual)
        pos.append(s.position_ids)
    return Batch(np.array(ids), np.stack(vis), np.stack(pos),
                 np.array([s.label for s in seqs]), layout[0])


def batch_forward(ckpt: ModelCheckpoint, batch: Batch, keep_cache=False):
    """Batched prefill; returns output probabilities and (optionally) a backprop cache."""
    arch = ckpt.arch
    dtype = arch.dtype
    params = {k: np.asarray(v, dtype=dtype) for k, v in ckpt.params.items()}
    text = batch.token_ids >= 0
    x = np.zeros(batch.token_ids.shape + (arch.width,), dtype=dtype)
    x[text] = params["tok_emb"][batch.token_ids[text]]
    x[~text] = batch.visual.reshape(-1, arch.width)
    x = x + params["pos_emb"][batch.positions]
    caches = []
    for j in range(arch.n_layers):
        layer = {name: params[f"layers.{j}.{name}"] for name in LAYER_TENSORS}
        x, _, cache = block_forward(layer, x, arch.n_heads, arch.norm_epsilon,
                                    keep_cache=keep_cache)
        caches.append(cache)
    last = x[:, -1]
    hf, invf = rms_norm(last, params["final_norm"], arch.norm_epsilon)
    probs = softmax(hf @ params["unembed"])
    cache = dict(params=params, text=text, caches=caches, last=last, hf=hf, invf=invf, x=x)
    return probs, (cache if keep_cache else None)


def loss_and_grads(ckpt: ModelCheckpoint, batch: Batch):
    """Mean cross-entropy of the label at the last position and its exact gradient."""
    arch = ckpt.arch
    eps = arch.norm_epsilon
    probs, cache = batch_forward(ckpt, batch, keep_cache=True)
    params = cache["params"]
    nb = len(batch.labels)
    rows = np.arange(nb)
    loss = float(-np.mean(np.log(probs[rows, batch.labels])))

    grads = {}
    dlogits = probs.copy()
    dlogits[rows, batch.labels] -= 1.0
    dlogits /= nb
    grads["unembed"] = cache["hf"].T @ dlogits
    dhf = dlogits @ params["unembed"].T
    dlast, grads["final_norm"] = _rms_backward(dhf, cache["last"], cache["invf"], params["final_norm"])
    dx = np.zeros_like(cache["x"])
    dx[:, -1] = dlast
    for j in reversed(range(arch.n_layers)):
        layer = {name: params[f"layers.{j}.{name}"] for name in LAYER_TENSORS}
        dx, layer_grads = _block_backward(layer, cache["caches"][j], dx, arch.n_heads, eps)
        for name, g in layer_grads.items():
            grads[f"layers.{j}.{name}"] = g

    text = cache["text"]
    d = arch.width
    g_tok = np.zeros_like(params["tok_emb"])
    np.add.at(g_tok, batch.token_ids[text], dx[text])
    g_pos = np.zeros_like(params["pos_emb"])
    np.add.at(g_pos, batch.positions.reshape(-1), dx.reshape(-1, d))
    grads["tok_emb"] = g_tok
    grads["pos_emb"] = g_pos
    return loss, {k: grads[k] for k in ckpt.params}


def _rms_backward(dy, x, inv, gain):
    reduce_axes = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * x * inv, axis=reduce_axes)
    dxhat = dy * gain
    dx = inv * dxhat - x * inv**3 * np.mean(dxhat * x, axis=-1, keepdims=True)
    return dx, dgain


def _flat_matmul_grad(a, b):
    """Sum over batch/sequence of a^T b for ``(..., p)`` and ``(..., q)`` arrays."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _block_backward(p, c, dout, n_heads, eps):
    nb, n, d = dout.shape
    dh = d // n_heads
    g = {}

    # gated MLP
    g["w_down"] = _flat_matmul_grad(c["z"], dout)
    dz = dout @ p["w_down"].T
    dact = dz * c["up"]
    dup = dz * c["act"]
    sig = 1.0 / (1.0 + np.exp(-c["gate"]))
    dgate = dact * sig * (1.0 + c["gate"] * (1.0 - sig))
    g["w_gate"] = _flat_matmul_grad(c["h2"], dgate)
    g["w_up"] = _flat_matmul_grad(c["h2"], dup)
    dh2 = dgate @ p["w_gate"].T + dup @ p["w_up"].T
    dx1_norm, g["mlp_norm"] = _rms_backward(dh2, c["x1"], c["inv2"], p["mlp_norm"])
    dx1 = dout + dx1_norm

    # causal multi-head attention
    g["wo"] = _flat_matmul_grad(c["mixed"], dx1)
    dmixed = (dx1 @ p["wo"].T).reshape(nb, n, n_heads, dh).transpose(0, 2, 1, 3)
    attn = c["attn"]
    dattn = dmixed @ c["v"].transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dmixed
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores *= 1.0 / math.sqrt(dh)
    dq = dscores @ c["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ c["q"]

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(nb, n, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    g["wq"] = _flat_matmul_grad(c["h"], dq)
    g["wk"] = _flat_matmul_grad(c["h"], dk)
    g["wv"] = _flat_matmul_grad(c["h"], dv)
    dh_ = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
    dx_norm, g["attn_norm"] = _rms_backward(dh_, c["x"], c["inv1"], p["attn_norm"])
    return dx1 + dx_norm, g


def _get_batch(dataset, indices) -> Batch:
    if hasattr(dataset, "collate"):
        return dataset.collate(indices)
    return collate([dataset[int(i)] for i in indices])


def train(ckpt: ModelCheckpoint, dataset, config: TrainConfig, log_every: int = 0):
    """Mini-batch training; returns ``(new_checkpoint, per-step losses)``.

    Batches are drawn from seeded epoch permutations, so the result is a pure
    function of (initial weights, dataset, config).
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if not config.lr > 0:
        raise ConfigError("learning rate must be positive")
    if config.decay not in ("constant", "cosine"):
        raise ConfigError(f"unknown lr decay {config.decay!r}")
    if config.steps == 0:
        return ckpt, []

    dtype = ckpt.arch.dtype
    params = {k: np.array(v, dtype=dtype) for k, v in ckpt.params.items()}
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    second = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    batch_size = min(config.batch, len(dataset))
    order, cursor = rng.permutation(len(dataset)), 0
    losses = []

    for step in range(1, config.steps + 1):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(dataset)), 0
        idx = np.sort(order[cursor:cursor + batch_size])
        cursor += batch_size
        loss, grads = loss_and_grads(ModelCheckpoint(ckpt.arch, params), _get_batch(dataset, idx))
        if not np.isfinite(loss) or loss > 1e3:
            raise TrainingError(step, loss)
        losses.append(loss)

        if config.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.clip_norm:
                grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
        lr = _lr_at(config, step)
        for k, g in grads.items():
            if config.optimizer == "adam":
                velocity[k] = b1 * velocity[k] + (1 - b1) * g
                second[k] = b2 * second[k] + (1 - b2) * g * g
                mhat = velocity[k] / (1 - b1**step)
                vhat = second[k] / (1 - b2**step)
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + adam_eps)
            elif config.optimizer == "sgd":
                if config.momentum:
                    velocity[k] = config.momentum * velocity[k] + g
                    g = velocity[k]
                params[k] = params[k] - lr * g
            else:
                raise ConfigError(f"unknown optimizer {config.optimizer!r}")
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, float(np.mean(losses[-log_every:])))

    return ModelCheckpoint(ckpt.arch, params), losses
