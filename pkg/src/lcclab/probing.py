"""Contrastive probing of attention heads.

Every sample ``(q, r+)`` gets a negative response ``r-``: the most similar
*different* response in the pool.  For a head, the pruned activation at
the last question token is edited by the head's lost component and paired
with the dense activation at the end of ``q + r+`` (label 1) and of
``q + r-`` (label 0).  A logistic-regression probe on these pairs scores
the head; heads are ranked by held-out probe accuracy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ActivationTrace, CaptureRequest, ModelParams, capture, logit_lens

log = logging.getLogger(__name__)

__all__ = [
    "ContrastiveTuple",
    "ProbePair",
    "ProbeRecord",
    "ProbeHyper",
    "ProbeFeatures",
    "encode_response",
    "build_contrastive_dataset",
    "edit_question_activation",
    "probe_features",
    "build_probe_pairs",
    "train_probe",
    "rank_heads",
    "select_heads_by_metric",
]


@dataclass(frozen=True)
class ContrastiveTuple:
    q: tuple
    r_plus: tuple
    r_minus: tuple
    provenance: int

    def __post_init__(self):
        if tuple(self.r_minus) == tuple(self.r_plus):
            raise ValueError("negative response equals the positive response")


@dataclass
class ProbePair:
    m: np.ndarray
    label: int


@dataclass
class ProbeRecord:
    layer: int
    head: int
    accuracy: float
    weights: np.ndarray = field(repr=False)
    bias: float = 0.0

    @property
    def site(self) -> tuple[int, int]:
        return (self.layer, self.head)


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 1e-2
    epochs: int = 100
    train_fraction: float = 0.7
    seed: int = 0


def encode_response(r: Sequence[int], params: ModelParams) -> np.ndarray:
    """Bag-of-tokens sentence vector: mean of the token embedding rows."""
    if len(r) == 0:
        raise ValueError("cannot encode an empty response")
    emb = params["tok_emb"].detach().double().numpy()
    idx = np.asarray(list(r))
    if idx.min() < 0 or idx.max() >= emb.shape[0]:
        raise ValueError("token id out of range")
    return emb[idx].mean(axis=0)


def build_contrastive_dataset(
    samples: Sequence[tuple[Sequence[int], Sequence[int]]],
    params: ModelParams,
    encoder: Callable[[Sequence[int], ModelParams], np.ndarray] = encode_response,
) -> list[ContrastiveTuple]:
    """Pair each sample with its nearest distinct response by cosine similarity."""
    pool = [tuple(r) for _, r in samples]
    if len(set(pool)) < 2:
        raise ValueError("need at least two distinct responses to form negatives")
    enc = np.stack([encoder(r, params) for r in pool])
    norms = np.linalg.norm(enc, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = enc / safe[:, None]
    sims = unit @ unit.T
    sims[norms == 0, :] = 0.0
    sims[:, norms == 0] = 0.0
    out = []
    for i, (q, r) in enumerate(samples):
        r = tuple(r)
        valid = np.array([p != r for p in pool])
        s = np.where(valid, sims[i], -np.inf)
        j = int(np.argmax(s))  # first maximum = lowest pool index
        out.append(ContrastiveTuple(tuple(q), r, pool[j], j))
    return out


def edit_question_activation(z_p_q, c) -> np.ndarray:
    z_p_q = np.asarray(z_p_q, dtype=np.float64)
    c = np.asarray(getattr(c, "c", c), dtype=np.float64)
    if z_p_q.shape[-1] != c.shape[-1]:
        raise ValueError(f"length mismatch: {z_p_q.shape[-1]} vs {c.shape[-1]}")
    return z_p_q + c


@dataclass
class ProbeFeatures:
    """Activations shared by the probe pairs of every head."""

    question: ActivationTrace  # pruned model, last question token
    positive: ActivationTrace  # dense model, last token of q + r+
    negative: ActivationTrace  # dense model, last token of q + r-
    kept: list[int]
    skipped: int = 0


def probe_features(tuples: Sequence[ContrastiveTuple], dense: ModelParams, pruned: ModelParams, heads=None) -> ProbeFeatures:
    max_len = dense.config.max_seq_len
    kept = [
        i for i, t in enumerate(tuples) if len(t.q) + max(len(t.r_plus), len(t.r_minus)) <= max_len
    ]
    skipped = len(tuples) - len(kept)
    if skipped:
        log.warning("skipped %d contrastive tuples longer than max_seq_len=%d", skipped, max_len)
    if not kept:
        raise ValueError("no contrastive tuple fits in max_seq_len")
    req = CaptureRequest(heads=None if heads is None else tuple(sorted(heads)))
    sel = [tuples[i] for i in kept]
    return ProbeFeatures(
        question=capture(pruned, [t.q for t in sel], req),
        positive=capture(dense, [t.q + t.r_plus for t in sel], req),
        negative=capture(dense, [t.q + t.r_minus for t in sel], req),
        kept=kept,
        skipped=skipped,
    )


def build_probe_pairs(
    tuples: Sequence[ContrastiveTuple],
    dense: ModelParams,
    pruned: ModelParams,
    l: int,
    h: int,
    c,
    features: ProbeFeatures | None = None,
) -> list[ProbePair]:
    """``[z_c^q || z_d^{q+r+}]`` labelled 1 and ``[z_c^q || z_d^{q+r-}]`` labelled 0."""
    if features is None:
        features = probe_features(tuples, dense, pruned, heads=[(l, h)])
    zq = edit_question_activation(features.question[(l, h)], c)
    pos, neg = features.positive[(l, h)], features.negative[(l, h)]
    pairs = []
    for n in range(zq.shape[0]):
        pairs.append(ProbePair(np.concatenate([zq[n], pos[n]]), 1))
        pairs.append(ProbePair(np.concatenate([zq[n], neg[n]]), 0))
    return pairs


def train_probe(pairs: Sequence[ProbePair], hyper: ProbeHyper = ProbeHyper(), site=(0, 0)) -> ProbeRecord:
    """Logistic regression ``sigmoid(W m + b)`` trained with Adam on BCE.

    Pairs are split train/validation by a seeded shuffle stratified by
    label; the record holds validation accuracy at threshold 0.5.
    """
    if len(pairs) < 4:
        raise ValueError("need at least 4 probe pairs")
    labels = np.array([p.label for p in pairs])
    if len(set(labels.tolist())) < 2:
        raise ValueError("probe pairs carry a single label")
    x = torch.from_numpy(np.stack([p.m for p in pairs])).double()
    y = torch.from_numpy(labels).double()
    # stratified: the same train fraction of each label, chosen by a seeded shuffle
    g = torch.Generator().manual_seed(hyper.seed)
    tr_parts, va_parts = [], []
    for lab in (0, 1):
        idx = torch.from_numpy(np.flatnonzero(labels == lab))
        idx = idx[torch.randperm(len(idx), generator=g)]
        n_train = int(round(hyper.train_fraction * len(idx)))
        tr_parts.append(idx[:n_train])
        va_parts.append(idx[n_train:])
    tr, va = torch.cat(tr_parts), torch.cat(va_parts)
    w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=hyper.lr)
    for _ in range(hyper.epochs):
        logits = x[tr] @ w + b
        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, y[tr])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = torch.sigmoid(x[va] @ w + b) > 0.5
        acc = float((pred == y[va].bool()).double().mean()) if len(va) else float("nan")
    return ProbeRecord(site[0], site[1], acc, w.detach().numpy().copy(), float(b.detach()))


def rank_heads(records: Sequence[ProbeRecord], fraction: float) -> list[tuple[int, int]]:
    """Top ``ceil(fraction * n)`` heads by accuracy (ties: lower layer, lower head)."""
    if not records:
        raise ValueError("no probe records to rank")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ordered = sorted(records, key=lambda r: (-r.accuracy, r.layer, r.head))
    return [r.site for r in ordered[: math.ceil(fraction * len(records))]]


def _kl_rows(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    lp = p_logits.log_softmax(-1)
    lq = q_logits.log_softmax(-1)
    return (lp.exp() * (lp - lq)).sum(-1)


def head_metric(dense_trace, pruned_trace, metric: str, dense=None, pruned=None) -> dict[tuple[int, int], float]:
    out = {}
    heads = sorted(s for s in dense_trace.sites if s[1] != "ffn")
    for lh in heads:
        zd, zp = dense_trace[lh], pruned_trace[lh]
        if metric == "mse":
            out[lh] = float(np.mean(np.sum((zd - zp) ** 2, axis=1)))
        elif metric == "kl":
            if dense is None or pruned is None:
                raise ValueError("kl metric needs both models for the logit lens")
            with torch.no_grad():
                ld = logit_lens(torch.from_numpy(zd), *lh, dense.to(torch.float64))
                lp = logit_lens(torch.from_numpy(zp), *lh, pruned.to(torch.float64))
                out[lh] = float(_kl_rows(ld, lp).mean())
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return out


def select_heads_by_metric(dense_trace, pruned_trace, metric: str, fraction: float, dense=None, pruned=None) -> list[tuple[int, int]]:
    """Heads with the *smallest* dense/pruned discrepancy under ``metric``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    scores = head_metric(dense_trace, pruned_trace, metric, dense, pruned)
    ordered = sorted(scores, key=lambda lh: (scores[lh], lh))
    return ordered[: math.ceil(fraction * len(ordered))]
