"""What does pruning take away from an attention head?

Train (or reuse) the toy model, prune half of every weight matrix, and look
at the dense-minus-pruned activations of each head: how concentrated their
spectrum is, and how much the logit difference between the right and wrong
answer moves when the mean lost component is added back.
"""

import numpy as np
import torch

from lcclab.harness import ExperimentConfig, run_pipeline
from lcclab.lossdiff import head_recovery_scan, oracle_recovery_forward
from lcclab.pruning import calibration_norms, prune_unstructured, wanda_scores

torch.set_num_threads(1)
cfg = ExperimentConfig(out="runs/demo")
pipe = run_pipeline(cfg, until="decompose")
dense, pruned = pipe.dense, pipe.pruned
probe = pipe.dataset.split("probe")

# share of the loss energy held by the top singular direction, per head
print("head   top-1 energy  |mean loss|")
for site, comp in sorted(pipe.components.items()):
    energy = comp.sigma**2 / max((comp.sigma**2).sum(), 1e-300)
    print(f"{site!s:<7} {energy[0]:>11.3f}  {np.linalg.norm(comp.alpha_bar[:1]):>10.4f}")

# logit-lens view: lambda = logit(correct) - logit(wrong), before/after adding c
scan = head_recovery_scan(
    dense,
    pruned,
    [r.question for r in probe],
    [r.answer for r in probe],
    [r.wrong_answer for r in probe],
    k=1,
)
print("\nhead    lambda_dense  lambda_pruned  logit_gain")
for site, v in sorted(scan.items()):
    print(f"{site!s:<7} {v['lambda_dense']:>12.3f} {v['lambda_pruned']:>14.3f} {v['logit_gain']:>11.3f}")

# with per-sample, per-position differences the pruned model is exact again
calib = [r.sequence for r in pipe.dataset.split("train")[:128]]
attn_only, _ = prune_unstructured(dense, 0.5, wanda_scores(dense, calibration_norms(dense, calib)), kinds=("wq", "wk", "wv"))
seqs = [r.sequence for r in pipe.dataset.split("held_out")[:100]]
oracle, ref = oracle_recovery_forward(dense, attn_only, seqs)
print(f"\noracle recovery, max |logit difference|: {(oracle - ref).abs().max().item():.2e}")
