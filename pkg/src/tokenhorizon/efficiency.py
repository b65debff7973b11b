"""Analytic prefill FLOPs and KV-cache size for a pruning schedule.

Per decoder layer with ``n`` tokens, width ``d`` and gated-MLP width ``m``::

    MACs  = 4 n d^2   (Q, K, V, output projections)
          + 2 n^2 d   (dense score and mixing products)
          + 3 n d m   (gate, up and down projections)
    FLOPs = 2 * MACs

This is exactly what :class:`tokenhorizon.engine.MacCounter` tallies inside the
toy decoder.  Norms, softmax, activations and the unembedding are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .engine.config import ArchConfig
from .pruning.schedule import PruneSchedule

MIB = 2**20

ARCH_PRESETS = {
    # LLaVA-1.5-7B language decoder (Vicuna-7B)
    "llava-7b": ArchConfig(n_layers=32, width=4096, n_heads=32, mlp_width=11008,
                           vocab_size=32000, max_seq_len=4096, precision_mode="single"),
    # Qwen2.5-VL-7B decoder; grouped-query K/V is not modelled (full-width K/V assumed)
    "qwen25vl-7b": ArchConfig(n_layers=28, width=3584, n_heads=28, mlp_width=18944,
                              vocab_size=152064, max_seq_len=32768, precision_mode="single"),
}
PRESET_VISUAL_TOKENS = {"llava-7b": 576, "qwen25vl-7b": 576}

# Text tokens that bring the unpruned llava-7b estimate closest to 9.22 TFLOPs
# (see calibrate_n_text); frozen so reports are comparable across runs.
LLAVA_REFERENCE_FLOPS = 9.22e12
LLAVA_N_TEXT = 116


@dataclass(frozen=True)
class CostReport:
    per_layer_flops: tuple[int, ...]
    token_count_per_layer: tuple[int, ...]
    kv_cache_bytes: int
    n_text: int
    n_visual: int

    @property
    def total_flops(self) -> int:
        return sum(self.per_layer_flops)

    @property
    def mean_visual_tokens(self) -> float:
        counts = self.token_count_per_layer
        return sum(counts) / len(counts) - self.n_text if counts else 0.0

    @property
    def storage_mib(self) -> float:
        return self.kv_cache_bytes / MIB


def layer_macs(n: int, d: int, m: int) -> int:
    return 4 * n * d * d + 2 * n * n * d + 3 * n * d * m


def layer_flops(n: int, d: int, m: int) -> int:
    return 2 * layer_macs(n, d, m)


def flops_estimate(arch: ArchConfig, schedule: PruneSchedule, n_text: int, n_visual: int,
                   bytes_per_element: int = 2) -> CostReport:
    if n_text < 1:
        raise ValueError("n_text must be >= 1")
    visual = schedule.tokens_per_layer(n_visual, arch.n_layers)
    tokens = tuple(n_text + v for v in visual)
    per_layer = tuple(layer_flops(n, arch.width, arch.mlp_width) for n in tokens)
    kv = sum(2 * n * arch.width * bytes_per_element for n in tokens)
    return CostReport(per_layer, tokens, kv, n_text, n_visual)


def relative_reduction(report: CostReport, baseline: CostReport) -> float:
    return 1.0 - report.total_flops / baseline.total_flops


def calibrate_n_text(arch: ArchConfig, n_visual: int, target_flops: float,
                     max_text: int = 4096) -> int:
    """Text length whose unpruned estimate is closest to ``target_flops``."""
    empty = PruneSchedule("none")

    def gap(nt):
        return abs(flops_estimate(arch, empty, nt, n_visual).total_flops - target_flops)

    # total FLOPs grow monotonically with n_text: bisect for the crossing, then compare neighbours
    lo, hi = 1, max_text
    while lo < hi:
        mid = (lo + hi) // 2
        if flops_estimate(arch, empty, mid, n_visual).total_flops < target_flops:
            lo = mid + 1
        else:
            hi = mid
    return min((c for c in (lo - 1, lo) if c >= 1), key=gap)


def reports_to_csv(rows: list[tuple[str, CostReport]]) -> str:
    """Table-3 style CSV: method, tokens, flops_T, storage_MB (MB = 2**20 bytes)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "tokens", "flops_T", "storage_MB"])
    for name, rep in rows:
        writer.writerow([name, f"{rep.mean_visual_tokens:.1f}", f"{rep.total_flops / 1e12:.4f}",
                         f"{rep.storage_mib:.1f}"])
    return buf.getvalue()
