"""
Withdrawing tokens and layered schedules
========================================

Compare the accuracy of removing every visual token at a given layer with the
information curve, then benchmark a few two-stage schedules that share the
same average token budget.
"""

from pathlib import Path

from tokenhorizon.harness.experiments import run_schedule_bench, withdraw_curve
from tokenhorizon.harness.plots import curve_svg
from tokenhorizon.harness.recipes import TrainRecipe, cached_model, held_out
from tokenhorizon.pruning.schedule import load_preset

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "models"
model = cached_model(TrainRecipe(), seed=0, cache_dir=CACHE)
depth = model.arch.n_layers

curves = {}
for task in ("lookup", "majority"):
    c = withdraw_curve(model, held_out(task, 200, model.arch.width), n_profile=100)
    curves[task] = c["accuracy"]
    print(f"{task}: baseline {c['baseline']:.3f}, withdraw accuracy "
          + " ".join(f"{a:.3f}" for a in c["accuracy"]))
    print(f"   empirical horizon {c['empirical_horizon']}, detected {c['detected_horizon']}")

with open("withdraw.svg", "w") as fh:
    fh.write(curve_svg("withdraw-all accuracy", "layer", range(depth + 1), curves))

# %%
# Same budget, different second stage: withdraw everything late, or keep a
# small random subset from an earlier layer on.
names = ["toy-maxmin", "toy-maxmin-vtw", "toy-maxmin-random",
         "toy-lowdup-vtw", "toy-lowdup-random", "toy-attn-vtw", "toy-attn-random"]
res = run_schedule_bench(model, held_out("lookup", 500, model.arch.width),
                         [load_preset(n) for n in names])
for method, acc, rel, tokens, flops in res.rows:
    print(f"{method:20s} acc {acc:.3f}  rel {rel:.3f}  tokens {tokens:5.2f}  flops {flops}")
