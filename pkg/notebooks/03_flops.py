"""
Analytic cost of pruning schedules at 7B scale
==============================================

Only the shapes of the two 7B language models are needed; the text length is
calibrated once so the unpruned LLaVA prefill matches its published cost.
"""

from tokenhorizon.efficiency import (
    ARCH_PRESETS,
    LLAVA_N_TEXT,
    PRESET_VISUAL_TOKENS,
    flops_estimate,
    relative_reduction,
    reports_to_csv,
)
from tokenhorizon.pruning.schedule import EMPTY, load_preset, preset_names

for arch_name, prefix in (("llava-7b", ""), ("qwen25vl-7b", "qwen-")):
    arch, n_visual = ARCH_PRESETS[arch_name], PRESET_VISUAL_TOKENS[arch_name]
    base = flops_estimate(arch, EMPTY, LLAVA_N_TEXT, n_visual)
    rows = [("none", base)]
    for name in preset_names():
        if name == "none" or name.startswith("toy") or name.startswith("qwen-") != bool(prefix):
            continue
        rows.append((name, flops_estimate(arch, load_preset(name), LLAVA_N_TEXT, n_visual)))
    print(arch_name)
    print(reports_to_csv(rows))
    for name, rep in rows[1:]:
        print(f"  {name:24s} {100 * relative_reduction(rep, base):6.2f}% fewer FLOPs")
    print()
