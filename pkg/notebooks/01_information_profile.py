"""
Where do visual tokens stop mattering?
======================================

Train (or load from the cache) the base toy model, profile the information of
every visual token at every layer on held-out Lookup samples, and locate the
layer where that information dies out.
"""

from pathlib import Path

import numpy as np

from tokenhorizon.harness.recipes import TrainRecipe, cached_model, held_out
from tokenhorizon.information import aggregate_stats, detect_horizon, information_profile

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "models"
model = cached_model(TrainRecipe(), seed=0, cache_dir=CACHE)
print(model.arch)

# %%
# One sample first.  Row 0 is "zero this token right after embedding", the last
# row is always zero because nothing runs after the final layer.
data = held_out("lookup", 100, model.arch.width)
seq = data[0]
prof = information_profile(model, seq)
np.set_printoptions(precision=3, suppress=True, linewidth=120)
print("queried cell:", data.rows[0] * data.grid_side + data.cols[0])
print(prof.values)

# %%
# Averaged over samples.  The mean falls quickly, the spread a little later.
profiles = [information_profile(model, s) for s in data]
stats = aggregate_stats(profiles)
for layer, (m, v, a) in enumerate(zip(stats.mean, stats.variance, stats.mean_abs)):
    print(f"layer {layer}: mean {m:+.5f}  variance {v:.2e}  mean |info| {a:.5f}")

for tau in (1e-2, 1e-3, 1e-4):
    print(f"tau={tau:g}: horizon at layer {detect_horizon(stats, tau)}")
