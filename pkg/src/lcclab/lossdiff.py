"""Activation-loss analysis between a dense model and its pruned copy.

For a site (an attention head, or an FFN output) the loss matrix stacks
``z_dense - z_pruned`` over samples.  Its SVD gives the directions of the
lost information; averaging the per-sample projection coefficients gives a
single constant "lost component" that can be added back to the pruned
activation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .linalg import SvdFactors, svd_thin
from .model import ActivationTrace, CaptureRequest, ModelParams, capture, forward, inject_head_bias, logit_difference, logit_lens

__all__ = [
    "LossMatrix",
    "SvdComponents",
    "PrincipalComponent",
    "capture_pair",
    "assemble_loss_matrix",
    "decompose",
    "estimate_lost_component",
    "compensate_activation",
    "logit_gain",
    "head_recovery_scan",
    "oracle_recovery_forward",
    "write_table",
]


@dataclass
class LossMatrix:
    site: tuple
    dz: np.ndarray
    policy: str = "last"

    @property
    def n_samples(self) -> int:
        return self.dz.shape[0]


@dataclass
class SvdComponents:
    """SVD of a loss matrix plus the mean coefficient of each component.

    ``alpha_bar[i]`` is the sample mean of ``sigma_i * U[:, i]``, i.e. the
    average projection of the loss rows onto ``V[:, i]``.
    """

    factors: SvdFactors
    alpha_bar: np.ndarray

    @property
    def V(self) -> np.ndarray:
        return self.factors.V

    @property
    def sigma(self) -> np.ndarray:
        return self.factors.sigma


@dataclass
class PrincipalComponent:
    c: np.ndarray
    k: int


def _same_config(a: ModelParams, b: ModelParams) -> None:
    if a.config != b.config:
        raise ValueError(f"model configs differ: {a.config} vs {b.config}")


def capture_pair(
    dense: ModelParams,
    pruned: ModelParams,
    seqs: Sequence[Sequence[int]],
    heads: Iterable[tuple[int, int]] | None = None,
    positions="last",
    ffn_layers: Sequence[int] = (),
) -> tuple[ActivationTrace, ActivationTrace]:
    """Capture the same sites at the same positions in both models."""
    _same_config(dense, pruned)
    req = CaptureRequest(
        heads=None if heads is None else tuple(sorted(heads)),
        ffn_layers=tuple(ffn_layers),
        positions=positions,
    )
    return capture(dense, seqs, req), capture(pruned, seqs, req)


def assemble_loss_matrix(dense_trace: ActivationTrace, pruned_trace: ActivationTrace, site) -> LossMatrix:
    site = tuple(site)
    if site not in dense_trace.acts or site not in pruned_trace.acts:
        raise KeyError(f"site {site} missing from trace")
    if not np.array_equal(dense_trace.positions, pruned_trace.positions):
        raise ValueError("traces are not aligned on the same positions")
    return LossMatrix(site, dense_trace[site] - pruned_trace[site], dense_trace.policy)


def decompose(lm: LossMatrix) -> SvdComponents:
    f = svd_thin(lm.dz)
    return SvdComponents(f, (f.U * f.sigma).mean(axis=0))


def estimate_lost_component(lm, k: int, *, scale: float = 1.0, index: int | None = None) -> PrincipalComponent:
    """``c = scale * sum_{i<k} alpha_bar_i v_i``.

    ``lm`` may be a ``LossMatrix`` or an already computed ``SvdComponents``.
    With ``index`` set, only that single component is used (k is ignored
    apart from being recorded).  Components beyond the rank contribute zero.
    """
    comp = lm if isinstance(lm, SvdComponents) else decompose(lm)
    d = comp.V.shape[0]
    if k < 0:
        raise ValueError("k must be >= 0")
    if index is not None:
        if not 0 <= index < d:
            raise ValueError(f"component index {index} out of range")
        coef = comp.alpha_bar[index] if index < comp.V.shape[1] else 0.0
        return PrincipalComponent(scale * coef * comp.V[:, index] if index < comp.V.shape[1] else np.zeros(d), k)
    kk = min(k, comp.V.shape[1])
    c = comp.V[:, :kk] @ comp.alpha_bar[:kk]
    return PrincipalComponent(scale * c, k)


def compensate_activation(z_p, c) -> np.ndarray:
    z_p = np.asarray(z_p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z_p.shape[-1] != c.shape[-1]:
        raise ValueError(f"length mismatch: {z_p.shape[-1]} vs {c.shape[-1]}")
    return z_p + c


def logit_gain(lambda_recovered, lambda_pruned):
    return lambda_recovered - lambda_pruned


def head_recovery_scan(
    dense: ModelParams,
    pruned: ModelParams,
    questions: Sequence[Sequence[int]],
    correct: Sequence[int],
    incorrect: Sequence[int],
    k: int,
    scale: float = 1.0,
    component: int | None = None,
    heads: Iterable[tuple[int, int]] | None = None,
    cascade: bool = False,
) -> dict[tuple[int, int], dict]:
    """Mean logit-lens logit gain of compensating each head.

    Activations are taken at the last question token.  Each head is read
    through the logit lens before and after adding its lost component.  With
    ``cascade=True`` the pruned activations are re-captured from a model in
    which every scanned head has already been compensated.
    """
    heads = sorted(dense.config.heads if heads is None else heads)
    td, tp = capture_pair(dense, pruned, questions, heads)
    comps = {lh: decompose(assemble_loss_matrix(td, tp, lh)) for lh in heads}
    cs = {lh: estimate_lost_component(comps[lh], k, scale=scale, index=component).c for lh in heads}
    if cascade:
        model = pruned
        for lh in heads:
            model = inject_head_bias(model, *lh, cs[lh])
        tp = capture(model, questions, CaptureRequest(heads=tuple(heads)))
        # the captured rows already carry c
        base = {lh: tp[lh] - cs[lh] for lh in heads}
    else:
        base = {lh: tp[lh] for lh in heads}
    corr = torch.as_tensor(list(correct))
    inc = torch.as_tensor(list(incorrect))
    out = {}
    with torch.no_grad():
        for lh in heads:
            zp = base[lh]
            zc = compensate_activation(zp, cs[lh])
            lam_p = logit_difference(logit_lens(torch.from_numpy(zp), *lh, pruned.to(torch.float64)), corr, inc)
            lam_r = logit_difference(logit_lens(torch.from_numpy(zc), *lh, pruned.to(torch.float64)), corr, inc)
            lam_d = logit_difference(logit_lens(torch.from_numpy(td[lh]), *lh, dense.to(torch.float64)), corr, inc)
            out[lh] = {
                "lambda_dense": float(lam_d.mean()),
                "lambda_pruned": float(lam_p.mean()),
                "lambda_recovered": float(lam_r.mean()),
                "logit_gain": float(logit_gain(lam_r, lam_p).mean()),
            }
    return out


def oracle_recovery_forward(dense: ModelParams, pruned: ModelParams, seqs, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Pruned forward with every head replaced by ``z_p + (z_d - z_p)``.

    The per-sample, per-position oracle component is computed in context:
    at layer ``l`` the pruned model already sees the repaired residual
    stream from layers ``< l``.  Returns ``(oracle_logits, dense_logits)``.
    """
    _same_config(dense, pruned)
    d64, p64 = dense.to(dtype), pruned.to(dtype)
    dense_z = {}

    def keep(l, z):
        dense_z[l] = z
        return z

    with torch.no_grad():
        dense_logits, _ = forward(d64, seqs, head_hook=keep)

        def repair(l, z_p):
            delta = dense_z[l] - z_p
            return z_p + delta

        logits, _ = forward(p64, seqs, head_hook=repair)
    return logits, dense_logits


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Comma-separated table with a header row; floats use repr precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return path
