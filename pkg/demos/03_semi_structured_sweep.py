"""2:4 pruning, then sweep how many heads get compensated.

Compensating more heads costs more bias parameters, but the cost is
bounded: even with every head compensated it is 1/(2 d_model) of a
layer's attention weights.
"""

import torch

from lcclab.harness import ExperimentConfig, sweep

torch.set_num_threads(1)
cfg = ExperimentConfig(out="runs/demo").replace(prune={"scheme": "semi_structured", "n": 2, "m": 4})
rows = sweep(cfg, "head_fraction", [0.0625, 0.25, 0.5, 1.0])
d_model = cfg.model.d_model
print(f"{'fraction':>8} {'accuracy':>9} {'overhead':>9}   bound 1/(2*{d_model}) = {1 / (2 * d_model):.6f}")
for r in rows:
    print(f"{r['value']:>8} {r['accuracy']:>9.4f} {r['max_overhead']:>9.6f}")

rows = sweep(cfg, "k", [1, 3, 10])
print("\nK used to build the probing component:")
for r in rows:
    print(f"  K={r['value']:<3} accuracy {r['accuracy']:.4f}")
