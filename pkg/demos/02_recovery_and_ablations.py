"""Recover the pruned toy model and compare against the ablations.

Each variant is one pipeline config; stages shared between variants (the
dense model, pruning, captures, SVDs) are computed once and then served
from the cache under runs/demo.
"""

import numpy as np
import torch

from lcclab.harness import ExperimentConfig, run_pipeline

torch.set_num_threads(1)
base = ExperimentConfig(out="runs/demo")
variants = {
    "full": {},
    "random heads": {"probe": {"selector": "random"}},
    "smallest mse": {"probe": {"selector": "mse"}},
    "bias only": {"lcc": {"use_directions": False}},
    "no free bias": {"lcc": {"use_bias": False}},
}
seeds = range(3)

print(f"{'variant':<14}" + "".join(f"  seed {s}" for s in seeds) + "     mean")
for name, change in variants.items():
    accs = []
    for seed in seeds:
        rep = run_pipeline(base.replace(seed=seed, **change)).results["eval"].value
        accs.append(rep["accuracy"])
    print(f"{name:<14}" + "".join(f"  {a:.4f}" for a in accs) + f"   {np.mean(accs):.4f}")

rep = run_pipeline(base).results["eval"].value
print(f"\ndense {rep['dense']['accuracy']:.4f}, pruned {rep['pruned']['accuracy']:.4f}")
print("compensated heads:", ", ".join(rep["compensated_sites"]))
print(f"added parameters per layer, worst case: {rep['sparsity']['max_overhead']:.4%} of the attention weights")
