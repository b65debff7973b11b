"""Experiment runners.

Each runner is a pure function of (checkpoint, dataset, config).  Per-sample
work can be spread over worker processes; results are gathered back in sample
order, so the CSV bytes do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import get_context

import numpy as np

from ..efficiency import flops_estimate
from ..engine.config import ConfigError
from ..engine.forward import CaptureFlags, forward_prefill, resume_forward
from ..engine.model import ModelCheckpoint
from ..information import (
    LayerStats,
    aggregate_stats,
    detect_horizon,
    information_profile,
    retained_information,
)
from ..pruning import strategies
from ..pruning.apply import apply_schedule
from ..pruning.schedule import PruneSchedule
from .tasks import TaskDataset

EXPERIMENTS = {
    "info-prune": "accuracy after dropping the lowest-information tokens at one layer",
    "strategy": "retained information of each selection rule at one layer",
    "withdraw": "accuracy after withdrawing every visual token at each layer",
    "schedule": "accuracy and cost of layered pruning schedules",
    "capacity": "withdraw horizons of two model sizes",
}
ALIASES = {"E1": "info-prune", "E2": "strategy", "E3": "withdraw", "E4": "schedule",
           "E5": "capacity"}


@dataclass
class ExperimentResult:
    experiment_id: str
    header: list[str]
    rows: list[list]
    summary: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)   # title -> (x label, x, {series: y})

    def to_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        if manifest is not None:
            buf.write(f"# manifest: {manifest}\n")
        buf.write(f"# experiment: {self.experiment_id}\n")
        for key in sorted(self.metadata):
            buf.write(f"# {key}: {_fmt(self.metadata[key])}\n")
        for key in sorted(self.summary):
            buf.write(f"# summary.{key}: {_fmt(self.summary[key])}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def column(self, name: str) -> list:
        j = self.header.index(name)
        return [row[j] for row in self.rows]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    return str(value)


# -- sample-parallel map ---------------------------------------------------------

def _run_chunk(fn, items):
    return [fn(item) for item in items]


def map_samples(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally across ``workers`` processes (order kept)."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunks = [list(c) for c in np.array_split(np.arange(len(items)), min(workers, len(items)))]
    with ProcessPoolExecutor(len(chunks), mp_context=get_context("fork")) as pool:
        parts = pool.map(_run_chunk, [fn] * len(chunks),
                         [[items[i] for i in c] for c in chunks])
        return [r for part in parts for r in part]


def sample_seed(seed: int, sample_id: int, layer: int) -> int:
    """Independent, reproducible seed for one (run seed, sample, layer) triple."""
    return int(np.random.SeedSequence([seed, sample_id, layer]).generate_state(1, np.uint64)[0])


def _base_metadata(ckpt: ModelCheckpoint, dataset: TaskDataset, seed: int, **extra) -> dict:
    meta = {"checkpoint": ckpt.fingerprint(), "dataset": dataset.fingerprint(),
            "n_samples": len(dataset), "seed": seed}
    meta.update(extra)
    return meta


def _correct(probs, label) -> bool:
    return int(np.argmax(probs)) == int(label)


def _top_information(values: np.ndarray, count: int) -> tuple[int, ...]:
    """Indices of the ``count`` largest values; ties favour the smaller index."""
    order = np.lexsort((np.arange(len(values)), -values))
    return tuple(sorted(int(k) for k in order[:count]))


# -- info-prune ------------------------------------------------------------------

def _info_prune_sample(i, ckpt, dataset, ratios, layers, seed):
    seq = dataset[i]
    prof = information_profile(ckpt, seq, layers)
    full = forward_prefill(ckpt, seq, CaptureFlags(layers=layers))
    base = _correct(full.probs, seq.label)
    out = {}
    n_v = seq.n_visual
    for layer in layers:
        state = full.checkpoints[layer]
        for r in ratios:
            count = strategies.retained_count(1.0 - r, n_v)
            informed = _top_information(prof.values[layer], count)
            rand = strategies.random_subset(range(n_v), count, sample_seed(seed, i, layer))
            out[layer, r] = (
                _correct(resume_forward(ckpt, state, keep=informed).probs, seq.label),
                _correct(resume_forward(ckpt, state, keep=rand).probs, seq.label),
            )
    return base, out


def run_info_prune_curve(ckpt: ModelCheckpoint, dataset: TaskDataset, ratios, layers,
                         seed: int = 0, workers: int = 1) -> ExperimentResult:
    """Drop the lowest-information fraction ``ratio`` of visual tokens at ``layer``.

    Each (layer, ratio) cell reports accuracy for the informed choice and for a
    uniformly random choice of the same size.
    """
    ratios = [float(r) for r in ratios]
    layers = sorted(set(int(i) for i in layers))
    _check_layers(ckpt, layers)
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"prune ratio {r} outside [0, 1]")
    fn = partial(_info_prune_sample, ckpt=ckpt, dataset=dataset, ratios=ratios,
                 layers=layers, seed=seed)
    per_sample = map_samples(fn, range(len(dataset)), workers)
    n = len(per_sample)
    baseline = sum(b for b, _ in per_sample) / n
    rows = []
    informed_curves = {r: [] for r in ratios}
    random_curves = {r: [] for r in ratios}
    for layer in layers:
        for r in ratios:
            acc_i = sum(o[layer, r][0] for _, o in per_sample) / n
            acc_r = sum(o[layer, r][1] for _, o in per_sample) / n
            rows.append([layer, r, acc_i, acc_r, baseline])
            informed_curves[r].append(acc_i)
            random_curves[r].append(acc_r)
    series = {}
    for r in ratios:
        series[f"low-info dropped, ratio {r:g}"] = informed_curves[r]
        series[f"random dropped, ratio {r:g}"] = random_curves[r]
    return ExperimentResult(
        "info-prune", ["layer", "prune_ratio", "accuracy_informed", "accuracy_random",
                       "accuracy_baseline"], rows,
        summary={"baseline_accuracy": baseline},
        metadata=_base_metadata(ckpt, dataset, seed, schedule="single-layer drop"),
        curves={"accuracy vs pruning layer": ("layer", layers, series)},
    )


# -- strategy --------------------------------------------------------------------

INFORMED = ("AttentionTopK", "MaxMinDiversity", "LowDuplication")


def _strategy_sample(i, ckpt, dataset, strategy_names, ratios, layers, seed, clamp):
    seq = dataset[i]
    prof = information_profile(ckpt, seq, layers)
    attn_layers = [j for j in layers if j >= 1]
    full = forward_prefill(ckpt, seq, CaptureFlags(layers=layers, attention=attn_layers))
    n_v = seq.n_visual
    alive = tuple(range(n_v))
    out = {}
    for layer in layers:
        state = full.checkpoints[layer]
        for r in ratios:
            count = strategies.retained_count(r, n_v)
            for name in strategy_names:
                if name == "AttentionTopK":
                    if layer == 0:
                        continue
                    scores = strategies.last_row_visual_attention(
                        full.attention[layer], n_v, state.n_prefix)
                    kept = strategies.attention_topk(scores, alive, count)
                elif name == "MaxMinDiversity":
                    kept = strategies.maxmin_diversity(state.hidden_visual, alive, count)
                elif name == "LowDuplication":
                    kept = strategies.low_duplication(state.hidden_visual, alive, count,
                                                      sample_seed(seed, i, layer))
                elif name == "Random":
                    kept = strategies.random_subset(alive, count, sample_seed(seed, i, layer))
                elif name == "Withdraw":
                    kept = ()
                else:
                    raise ConfigError(f"unknown strategy {name!r}")
                out[name, layer, r] = retained_information(prof, layer, kept, clamp)
    return out, prof


def run_strategy_eval(ckpt: ModelCheckpoint, dataset: TaskDataset, strategy_names, ratios,
                      layers, seed: int = 0, clamp_negative: bool = False, tau: float = 1e-3,
                      workers: int = 1) -> ExperimentResult:
    """Mean retained information of each selection rule applied at a single layer.

    Samples are averaged (not summed).  AttentionTopK has no attention before
    the first decoder layer and is skipped at layer 0.
    """
    strategy_names = list(strategy_names)
    for name in strategy_names:
        if name not in strategies.STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r}")
    ratios = [float(r) for r in ratios]
    layers = sorted(set(int(i) for i in layers))
    _check_layers(ckpt, layers)
    fn = partial(_strategy_sample, ckpt=ckpt, dataset=dataset, strategy_names=strategy_names,
                 ratios=ratios, layers=layers, seed=seed, clamp=clamp_negative)
    per_sample = map_samples(fn, range(len(dataset)), workers)
    profiles = [p for _, p in per_sample]
    stats = aggregate_stats([p.values[layers] for p in profiles])
    rows = []
    series = {}
    for r in ratios:
        for name in strategy_names:
            ys = []
            for layer in layers:
                key = (name, layer, r)
                if key not in per_sample[0][0]:
                    continue
                mean = sum(o[key] for o, _ in per_sample) / len(per_sample)
                rows.append([name, r, layer, mean])
                ys.append(mean)
            if len(ys) == len(layers):
                series[f"{name}, keep {r:g}"] = ys
    horizon = detect_horizon(stats, tau) if layers == list(range(ckpt.arch.n_layers + 1)) else None
    return ExperimentResult(
        "strategy", ["strategy", "retain_ratio", "layer", "retained_information"], rows,
        summary={"detected_horizon": horizon, "tau": tau},
        metadata=_base_metadata(ckpt, dataset, seed, schedule="single-layer selection",
                                aggregation="mean over samples",
                                negative_information="clamped at 0" if clamp_negative
                                else "signed"),
        curves={"retained information vs layer": ("layer", layers, series)},
    )


# -- withdraw --------------------------------------------------------------------

def _withdraw_sample(i, ckpt, dataset, profile):
    seq = dataset[i]
    depth = ckpt.arch.n_layers
    full = forward_prefill(ckpt, seq, CaptureFlags(layers=range(depth + 1)))
    hits = [_correct(resume_forward(ckpt, full.checkpoints[j], keep=()).probs, seq.label)
            for j in range(depth + 1)]
    prof = information_profile(ckpt, seq) if profile else None
    return _correct(full.probs, seq.label), hits, prof


def empirical_horizon(accuracies, baseline: float, tolerance: float = 0.01) -> int:
    """First layer whose withdraw-all accuracy is within ``tolerance`` of the baseline."""
    for j, acc in enumerate(accuracies):
        if acc >= baseline - tolerance - 1e-12:
            return j
    return len(accuracies) - 1


def withdraw_curve(ckpt: ModelCheckpoint, dataset: TaskDataset, n_profile: int = 200,
                   tau: float = 1e-3, workers: int = 1) -> dict:
    """Withdraw accuracies, baseline, information stats and both horizons for one task."""
    fn = partial(_withdraw_indexed, ckpt=ckpt, dataset=dataset, n_profile=n_profile)
    per_sample = map_samples(fn, range(len(dataset)), workers)
    n = len(per_sample)
    depth = ckpt.arch.n_layers
    baseline = sum(b for b, _, _ in per_sample) / n
    accs = [sum(h[j] for _, h, _ in per_sample) / n for j in range(depth + 1)]
    profiles = [p for _, _, p in per_sample if p is not None]
    stats = aggregate_stats(profiles) if profiles else LayerStats(
        np.full(depth + 1, np.nan), np.full(depth + 1, np.nan), np.full(depth + 1, np.nan))
    return {
        "baseline": baseline,
        "accuracy": accs,
        "stats": stats,
        "empirical_horizon": empirical_horizon(accs, baseline),
        "detected_horizon": detect_horizon(stats, tau) if profiles else None,
    }


def _withdraw_indexed(i, ckpt, dataset, n_profile):
    return _withdraw_sample(i, ckpt, dataset, profile=i < n_profile)


def run_withdraw_sweep(ckpt: ModelCheckpoint, datasets: dict[str, TaskDataset],
                       n_profile: int = 200, tau: float = 1e-3, seed: int = 0,
                       workers: int = 1) -> ExperimentResult:
    """Withdraw every visual token at each layer and overlay mean information.

    The empirical horizon is the first layer whose accuracy is within one point
    of the unpruned accuracy.
    """
    depth = ckpt.arch.n_layers
    rows, summary, series = [], {}, {}
    for task in sorted(datasets):
        c = withdraw_curve(ckpt, datasets[task], n_profile, tau, workers)
        for j in range(depth + 1):
            rows.append([task, j, c["accuracy"][j], c["baseline"], c["stats"].mean[j],
                         c["stats"].mean_abs[j], c["stats"].variance[j]])
        summary[f"{task}.baseline_accuracy"] = c["baseline"]
        summary[f"{task}.empirical_horizon"] = c["empirical_horizon"]
        summary[f"{task}.detected_horizon"] = c["detected_horizon"]
        series[f"{task} withdraw accuracy"] = c["accuracy"]
    first = datasets[sorted(datasets)[0]]
    meta = _base_metadata(ckpt, first, seed, schedule="withdraw-all at layer",
                          tasks=sorted(datasets), tau=tau, n_profile=n_profile)
    meta["dataset"] = " ".join(datasets[t].fingerprint() for t in sorted(datasets))
    meta["n_samples"] = " ".join(str(len(datasets[t])) for t in sorted(datasets))
    return ExperimentResult(
        "withdraw", ["task", "layer", "withdraw_accuracy", "baseline_accuracy",
                     "mean_information", "mean_abs_information", "information_variance"],
        rows, summary, meta,
        curves={"withdraw-all accuracy vs layer": ("layer", list(range(depth + 1)), series)},
    )


# -- schedule --------------------------------------------------------------------

def _schedule_sample(i, ckpt, dataset, schedules):
    seq = dataset[i]
    base = _correct(forward_prefill(ckpt, seq).probs, seq.label)
    return base, [_correct(apply_schedule(ckpt, seq, s).result.probs, seq.label)
                  for s in schedules]


def run_schedule_bench(ckpt: ModelCheckpoint, dataset: TaskDataset,
                       schedules: list[PruneSchedule], seed: int = 0,
                       workers: int = 1) -> ExperimentResult:
    """Accuracy, relative accuracy, mean visual tokens and FLOPs for each schedule."""
    depth = ckpt.arch.n_layers
    for s in schedules:
        s.check_layers(depth)
    fn = partial(_schedule_sample, ckpt=ckpt, dataset=dataset, schedules=schedules)
    per_sample = map_samples(fn, range(len(dataset)), workers)
    n = len(per_sample)
    baseline = sum(b for b, _ in per_sample) / n
    seq = dataset[0]
    base_cost = flops_estimate(ckpt.arch, PruneSchedule("none"), seq.n_text, seq.n_visual)
    rows = [["none", baseline, 1.0, float(seq.n_visual), base_cost.total_flops]]
    for j, s in enumerate(schedules):
        acc = sum(hits[j] for _, hits in per_sample) / n
        cost = flops_estimate(ckpt.arch, s, seq.n_text, seq.n_visual)
        rel = acc / baseline if baseline > 0 else float("nan")
        rows.append([s.name, acc, rel, cost.mean_visual_tokens, cost.total_flops])
    return ExperimentResult(
        "schedule", ["method", "accuracy", "relative_accuracy", "tokens", "flops"], rows,
        summary={"baseline_accuracy": baseline},
        metadata=_base_metadata(ckpt, dataset, seed,
                                schedule=" ".join(s.name for s in schedules)),
    )


# -- capacity --------------------------------------------------------------------

def run_capacity_comparison(checkpoints: dict[str, ModelCheckpoint],
                            datasets: dict[str, dict[str, TaskDataset]],
                            n_profile: int = 200, tau: float = 1e-3, seed: int = 0,
                            workers: int = 1) -> ExperimentResult:
    """Withdraw horizons per model and task.

    ``datasets[model][task]`` must match each model's width.  Pass the smaller
    model first; ``summary['deeper_with_capacity']`` records whether the last
    model's Lookup horizon is at least the first's minus one layer.
    """
    names = list(checkpoints)
    if len(names) < 2:
        raise ConfigError("capacity comparison needs at least two checkpoints")
    rows, summary = [], {}
    for name in names:
        ckpt = checkpoints[name]
        for task in sorted(datasets[name]):
            c = withdraw_curve(ckpt, datasets[name][task], n_profile, tau, workers)
            depth = ckpt.arch.n_layers
            rows.append([name, task, depth, c["baseline"], c["empirical_horizon"],
                         c["empirical_horizon"] / depth, c["detected_horizon"]])
            summary[f"{name}.{task}.empirical_horizon"] = c["empirical_horizon"]
    first, last = names[0], names[-1]
    if "lookup" in datasets[first] and "lookup" in datasets[last]:
        summary["deeper_with_capacity"] = (
            summary[f"{last}.lookup.empirical_horizon"]
            >= summary[f"{first}.lookup.empirical_horizon"] - 1)
    meta = {"checkpoint": " ".join(checkpoints[n].fingerprint() for n in names),
            "models": names, "seed": seed, "tau": tau, "schedule": "withdraw-all at layer"}
    return ExperimentResult(
        "capacity", ["model", "task", "n_layers", "baseline_accuracy", "empirical_horizon",
                     "relative_horizon", "detected_horizon"], rows, summary, meta)


def _check_layers(ckpt, layers):
    for i in layers:
        if not 0 <= i <= ckpt.arch.n_layers:
            raise ConfigError(f"layer {i} outside [0, {ckpt.arch.n_layers}]")
