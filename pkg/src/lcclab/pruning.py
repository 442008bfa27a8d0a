"""Wanda-style unstructured, N:M semi-structured and whole-head pruning.

Every pruning call returns a new ``ModelParams`` together with a
``PruneMask``; the mask is the source of truth for sparsity accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .io import read_container, write_container
from .model import ModelParams, forward

__all__ = [
    "PruneMask",
    "SparsityReport",
    "calibration_norms",
    "score_weights_wanda",
    "wanda_scores",
    "prune_unstructured",
    "prune_semi_structured",
    "prune_structured_heads",
    "head_scores_from_wanda",
    "compensation_overhead",
    "sparsity_report",
    "check_mask_faithful",
    "save_mask",
    "load_mask",
]


@dataclass
class PruneMask:
    """Binary keep-masks (True = kept) for each prunable matrix."""

    masks: dict[str, np.ndarray]
    scheme: str = "unstructured"
    n: int | None = None
    m: int | None = None

    def __getitem__(self, name):
        return self.masks[name]

    @property
    def tag(self) -> str:
        return f"semi_structured({self.n}:{self.m})" if self.scheme == "semi_structured" else self.scheme


@dataclass
class SparsityReport:
    global_sparsity: float
    per_matrix: dict[str, float]
    overhead_per_layer: dict[int, float] = field(default_factory=dict)

    @property
    def max_overhead(self) -> float:
        return max(self.overhead_per_layer.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "global_sparsity": self.global_sparsity,
            "per_matrix": self.per_matrix,
            "overhead_per_layer": {str(k): v for k, v in self.overhead_per_layer.items()},
            "max_overhead": self.max_overhead,
        }


def calibration_norms(params: ModelParams, seqs, batch_size: int = 128) -> dict[str, np.ndarray]:
    """L2 norm of every input feature of every prunable matrix.

    Norms are taken over all non-padding token positions of ``seqs``.
    """
    acc: dict = {}
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            forward(params, list(seqs[start : start + batch_size]), record_inputs=acc)
    out = {}
    for name in params.weight_names():
        # q, k, v share one input
        key = name.replace(".wk", ".wq").replace(".wv", ".wq")
        out[name] = np.sqrt(acc[key].numpy())
    return out


def score_weights_wanda(w, norms) -> np.ndarray:
    """``|w[i, j]| * norms[j]``."""
    w = np.asarray(w, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != (w.shape[-1],):
        raise ValueError(f"need {w.shape[-1]} input norms, got {norms.shape}")
    if (norms < 0).any():
        raise ValueError("input norms must be non-negative")
    return np.abs(w) * norms[None, :]


def wanda_scores(params: ModelParams, norms: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: score_weights_wanda(params[name].numpy(), norms[name]) for name in params.weight_names()}


def _apply(params: ModelParams, masks: dict[str, np.ndarray]) -> ModelParams:
    out = params.clone()
    for name, keep in masks.items():
        out.tensors[name] = out.tensors[name] * torch.from_numpy(keep).to(out.tensors[name].dtype)
    return out


def _lowest(scores: np.ndarray, count: int) -> np.ndarray:
    """Flat indices of the ``count`` lowest scores; ties prune lower index first."""
    flat = scores.ravel()
    order = np.lexsort((np.arange(flat.size), flat))
    return order[:count]


def _targets(params: ModelParams, kinds) -> list[str]:
    names = params.weight_names()
    if kinds is None:
        return names
    return [n for n in names if n.rsplit(".", 1)[1] in set(kinds)]


def prune_unstructured(
    params: ModelParams, ratio: float, scores: dict[str, np.ndarray], kinds=None
) -> tuple[ModelParams, PruneMask]:
    """Zero the lowest-scoring ``floor(ratio * size)`` weights of each matrix.

    ``kinds`` restricts pruning to some matrix kinds (e.g. ``("wq", "wk", "wv")``).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    masks = {}
    for name in _targets(params, kinds):
        s = scores[name]
        keep = np.ones(s.size, dtype=bool)
        keep[_lowest(s, int(math.floor(ratio * s.size)))] = False
        masks[name] = keep.reshape(s.shape)
    return _apply(params, masks), PruneMask(masks, "unstructured")


def nm_keep_mask(scores: np.ndarray, n: int, m: int) -> np.ndarray:
    """Keep the ``n`` highest scores in each group of ``m`` along the last axis."""
    if not 0 < n < m:
        raise ValueError(f"need 0 < n < m, got {n}:{m}")
    rows, cols = scores.shape
    if cols % m:
        pad = m - cols % m
        raise ValueError(f"input dimension {cols} not divisible by {m}; pad by {pad} columns")
    groups = scores.reshape(rows, cols // m, m)
    # stable sort on the negated score keeps lower indices on ties
    order = np.argsort(-groups, axis=-1, kind="stable")
    keep = np.zeros_like(groups, dtype=bool)
    np.put_along_axis(keep, order[..., :n], True, axis=-1)
    return keep.reshape(rows, cols)


def prune_semi_structured(
    params: ModelParams, n: int, m: int, scores: dict[str, np.ndarray], kinds=None
) -> tuple[ModelParams, PruneMask]:
    masks = {name: nm_keep_mask(scores[name], n, m) for name in _targets(params, kinds)}
    return _apply(params, masks), PruneMask(masks, "semi_structured", n=n, m=m)


def head_slices(params: ModelParams, l: int, h: int) -> dict[str, tuple[slice, slice]]:
    dh = params.config.d_head
    rows = slice(h * dh, (h + 1) * dh)
    allc = slice(None)
    p = f"layers.{l}."
    return {p + "wq": (rows, allc), p + "wk": (rows, allc), p + "wv": (rows, allc), p + "wo": (allc, rows)}


def head_scores_from_wanda(params: ModelParams, scores: dict[str, np.ndarray]) -> dict[tuple[int, int], float]:
    out = {}
    for l, h in params.config.heads:
        out[(l, h)] = float(sum(scores[name][sl].sum() for name, sl in head_slices(params, l, h).items()))
    return out


def prune_structured_heads(params: ModelParams, ratio: float, head_scores: dict[tuple[int, int], float]) -> tuple[ModelParams, PruneMask]:
    """Remove the ``floor(ratio * L * H)`` lowest-scoring heads entirely."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    cfg = params.config
    heads = cfg.heads
    count = int(math.floor(ratio * len(heads)))
    ranked = sorted(heads, key=lambda lh: (head_scores[lh], lh))
    removed = set(ranked[:count])
    for l in range(cfg.n_layers):
        if all((l, h) in removed for h in range(cfg.n_heads)):
            raise ValueError(f"pruning would remove every head of layer {l}")
    masks = {name: np.ones(tuple(params[name].shape), dtype=bool) for name in params.weight_names()}
    for l, h in sorted(removed):
        for name, sl in head_slices(params, l, h).items():
            masks[name][sl] = False
    mask = PruneMask(masks, "structured_heads")
    mask.removed_heads = sorted(removed)
    return _apply(params, masks), mask


def compensation_overhead(n_compensated: int, d_head: int, d_model: int) -> float:
    """Added parameters relative to the four attention projections of a layer."""
    return n_compensated * d_head * 2 / (4 * d_model**2)


def sparsity_report(params: ModelParams, mask: PruneMask, compensated_heads=()) -> SparsityReport:
    cfg = params.config
    per_matrix = {}
    pruned = total = 0
    for name in params.weight_names():
        keep = mask.masks.get(name)
        size = params[name].numel()
        zeros = 0 if keep is None else int(keep.size - keep.sum())
        per_matrix[name] = zeros / size
        pruned += zeros
        total += size
    per_layer = {l: 0 for l in range(cfg.n_layers)}
    for l, h in set(map(tuple, compensated_heads)):
        per_layer[l] += 1
    overhead = {l: compensation_overhead(k, cfg.d_head, cfg.d_model) for l, k in per_layer.items()}
    return SparsityReport(pruned / total, per_matrix, overhead)


def check_mask_faithful(params: ModelParams, mask: PruneMask) -> bool:
    """True iff every masked-out weight is exactly zero."""
    for name, keep in mask.masks.items():
        w = params[name].detach().numpy()
        if np.any(w[~keep] != 0):
            return False
    return True


def save_mask(mask: PruneMask, path):
    meta = {"kind": "mask", "scheme": mask.scheme, "n": mask.n, "m": mask.m}
    if hasattr(mask, "removed_heads"):
        meta["removed_heads"] = [list(x) for x in mask.removed_heads]
    return write_container(path, meta, mask.masks, dtype="bits")


def load_mask(path) -> PruneMask:
    meta, tensors = read_container(path)
    if meta.get("kind") != "mask":
        raise ValueError(f"{path} is not a mask file")
    mask = PruneMask(tensors, meta["scheme"], meta.get("n"), meta.get("m"))
    if "removed_heads" in meta:
        mask.removed_heads = [tuple(x) for x in meta["removed_heads"]]
    return mask
