from __future__ import annotations

from dataclasses import dataclass

from ..engine.config import ConfigError
from ..engine.forward import (
    CaptureFlags,
    LayerCheckpoint,
    MacCounter,
    PrefillResult,
    advance,
    drop_visual,
    embed,
    readout,
)
from ..engine.model import ModelCheckpoint
from ..engine.sequence import MultimodalSequence
from . import strategies
from .schedule import PruneAction, PruneSchedule


@dataclass
class ScheduleRun:
    result: PrefillResult
    alive_after: list[tuple[int, ...]]   # index i: alive set once layer-i actions ran
    tokens_per_layer: list[int]          # visual tokens seen by decoder layers 1..n_layers


def select(action: PruneAction, state: LayerCheckpoint, count: int,
           attention=None) -> tuple[int, ...]:
    """Apply one action's selection rule to a captured layer state."""
    alive = state.alive_visual
    if action.strategy == "Withdraw":
        return ()
    if action.strategy == "Random":
        return strategies.random_subset(alive, count, action.seed)
    if action.strategy == "AttentionTopK":
        if attention is None:
            raise ConfigError(f"AttentionTopK at layer {action.layer}: no attention available")
        scores = strategies.last_row_visual_attention(attention, state.n_alive, state.n_prefix)
        return strategies.attention_topk(scores, alive, count)
    if action.strategy == "MaxMinDiversity":
        return strategies.maxmin_diversity(state.hidden_visual, alive, count)
    return strategies.low_duplication(state.hidden_visual, alive, count, action.seed)


def apply_schedule(ckpt: ModelCheckpoint, seq: MultimodalSequence,
                   schedule: PruneSchedule) -> ScheduleRun:
    """Prefill with the schedule's drops applied at their layers."""
    depth = ckpt.arch.n_layers
    schedule.check_layers(depth)
    counts = schedule.target_counts(seq.n_visual)
    counter = MacCounter()
    state = embed(ckpt, seq)
    kept_at = {}
    for action, count in zip(schedule.actions, counts):
        attention = {}
        capture = None
        if action.strategy == "AttentionTopK":
            if action.layer == 0:
                raise ConfigError("AttentionTopK needs a decoder layer >= 1; no attention at layer 0")
            capture = CaptureFlags(attention=[action.layer])
        state = advance(ckpt, state, action.layer, capture, counter, attention=attention)
        state = drop_visual(state, select(action, state, count, attention.get(action.layer)))
        kept_at[action.layer] = state.alive_visual
    alive_after, alive = [], tuple(range(seq.n_visual))
    for i in range(depth + 1):
        alive = kept_at.get(i, alive)
        alive_after.append(alive)
    final = advance(ckpt, state, depth, None, counter)
    result = PrefillResult(probs=readout(ckpt, final), macs=counter.macs, final_state=final)
    return ScheduleRun(result, alive_after, [len(alive_after[j - 1]) for j in range(1, depth + 1)])
