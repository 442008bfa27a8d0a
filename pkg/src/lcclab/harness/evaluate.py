"""Accuracy and perplexity on a split of records."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F

from ..model import ModelParams, forward, pad_batch
from .tasks import Record

__all__ = ["evaluate", "answer_logits"]


def _logits(params: ModelParams, seqs, plan=None, batch_size: int = 256) -> list[torch.Tensor]:
    from ..lcc import recovery_forward

    out = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            toks, lens = pad_batch(seqs[start : start + batch_size])
            if plan is None:
                lg, _ = forward(params, toks, lengths=lens)
            else:
                lg = recovery_forward(params, plan, toks, lens)
            out.append((lg.double(), toks, lens))
    return out


def answer_logits(params: ModelParams, records: Sequence[Record], plan=None) -> torch.Tensor:
    """Next-token logits at each record's answer position, ``(N, vocab)``."""
    rows = []
    i = 0
    for lg, _, _ in _logits(params, [r.sequence for r in records], plan):
        for b in range(lg.shape[0]):
            rows.append(lg[b, records[i].answer_position])
            i += 1
    return torch.stack(rows)


def evaluate(params: ModelParams, records: Sequence[Record], plan=None) -> dict:
    """``accuracy`` (answer logit beats the alternative; ties score half) and ``perplexity``.

    Perplexity is ``exp`` of the mean next-token cross-entropy over all
    response tokens of the split.  Records without an answer only count
    toward perplexity.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty split")
    seqs = [r.sequence for r in records]
    ce_sum, n_tok, correct, n_ans = 0.0, 0, 0.0, 0
    i = 0
    for lg, toks, lens in _logits(params, seqs, plan):
        ce = F.cross_entropy(lg[:, :-1].transpose(1, 2), toks[:, 1:], reduction="none")
        for b in range(lg.shape[0]):
            r = records[i]
            q = len(r.question)
            # targets at token index t come from logits at t - 1
            ce_sum += float(ce[b, q - 1 : int(lens[b]) - 1].sum())
            n_tok += int(lens[b]) - q
            if r.answer is not None:
                row = lg[b, r.answer_position]
                diff = float(row[r.answer] - row[r.wrong_answer])
                # an exact tie is a coin flip
                correct += 1.0 if diff > 0 else 0.5 if diff == 0 else 0.0
                n_ans += 1
            i += 1
    return {
        "accuracy": correct / n_ans if n_ans else float("nan"),
        "perplexity": math.exp(ce_sum / n_tok),
        "n_samples": len(records),
    }
