"""Synthetic yes/no task, the fixed vocabulary, and JSONL ingestion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "VOCAB",
    "TOKEN_ID",
    "BOS",
    "QUERY",
    "YES",
    "NO",
    "EOS",
    "SYM_A",
    "SYM_B",
    "Record",
    "TaskDataset",
    "gen_synthetic_task",
    "majority_answer",
    "answer_for_question",
    "tokenize",
    "detokenize",
    "ingest_jsonl",
    "export_jsonl",
]

N_FILLERS = 8
VOCAB_SIZE = 64
VOCAB = ["<pad>", "<bos>", "?", "yes", "no", "<eos>", "A", "B"]
VOCAB += [f"f{i}" for i in range(N_FILLERS)]
VOCAB += [f"u{i}" for i in range(VOCAB_SIZE - len(VOCAB))]
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

BOS, QUERY, YES, NO, EOS = (TOKEN_ID[t] for t in ("<bos>", "?", "yes", "no", "<eos>"))
SYM_A, SYM_B = TOKEN_ID["A"], TOKEN_ID["B"]
FILLERS = tuple(TOKEN_ID[f"f{i}"] for i in range(N_FILLERS))
SPLITS = ("train", "recovery", "probe", "held_out")


@dataclass(frozen=True)
class Record:
    question: tuple[int, ...]
    response: tuple[int, ...]
    answer: int | None = None

    @property
    def sequence(self) -> tuple[int, ...]:
        return self.question + self.response

    @property
    def answer_position(self) -> int:
        """Index of the token whose next-token logits predict the answer."""
        return len(self.question) - 1

    @property
    def wrong_answer(self) -> int:
        return NO if self.answer == YES else YES


@dataclass
class TaskDataset:
    records: list[Record]
    splits: dict[str, list[int]] = field(default_factory=dict)
    seed: int | None = None

    def split(self, name: str) -> list[Record]:
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; have {sorted(self.splits)}")
        return [self.records[i] for i in self.splits[name]]

    def __len__(self) -> int:
        return len(self.records)


def majority_answer(symbols: Sequence[int]) -> int:
    """"yes" iff A occurs strictly more often than B."""
    a = sum(1 for s in symbols if s == SYM_A)
    b = sum(1 for s in symbols if s == SYM_B)
    return YES if a > b else NO


def answer_for_question(question: Sequence[int]) -> int:
    return majority_answer(question)


# A-minus-B margin and its probability; most samples sit on the boundary
YES_MARGINS = ((1, 0.85), (2, 0.15))
NO_MARGINS = ((0, 0.85), (-1, 0.15))


def _make_question(rng: np.random.Generator, want_yes: bool, min_len: int, max_len: int) -> list[int]:
    table = YES_MARGINS if want_yes else NO_MARGINS
    margin = int(rng.choice([m for m, _ in table], p=[p for _, p in table]))
    n = int(rng.integers(min_len, max_len + 1))
    choices = [m for m in range(max(abs(margin), 2), n + 1) if (m - margin) % 2 == 0]
    m = int(rng.choice(choices))
    n_a = (m + margin) // 2
    body = [SYM_A] * n_a + [SYM_B] * (m - n_a) + [int(rng.choice(FILLERS)) for _ in range(n - m)]
    rng.shuffle(body)
    return [BOS, *body, QUERY]


def gen_synthetic_task(seed: int = 0, n_samples: int = 2000, min_len: int = 8, max_len: int = 24) -> TaskDataset:
    """Majority-comparison puzzles split 70/10/10/10.

    Question: ``<bos> s_1 .. s_n ?`` over symbols A, B and fillers; response: ``yes <eos>`` or ``no <eos>``.
    Exactly half the samples (rounded down) are "yes".
    """
    if n_samples < 200:
        raise ValueError("n_samples must be >= 200")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n_samples, dtype=bool)
    labels[: n_samples // 2] = True
    rng.shuffle(labels)
    records = []
    for want_yes in labels:
        q = _make_question(rng, bool(want_yes), min_len, max_len)
        ans = answer_for_question(q)
        records.append(Record(question=tuple(q), response=(ans, EOS), answer=ans))
    n_train = int(0.7 * n_samples)
    n_rec = n_probe = int(0.1 * n_samples)
    bounds = np.cumsum([0, n_train, n_rec, n_probe, n_samples - n_train - n_rec - n_probe])
    splits = {name: list(range(bounds[i], bounds[i + 1])) for i, name in enumerate(SPLITS)}
    return TaskDataset(records=records, splits=splits, seed=seed)


def tokenize(text: str) -> list[int]:
    out = []
    for tok in text.split():
        if tok not in TOKEN_ID:
            raise KeyError(tok)
        out.append(TOKEN_ID[tok])
    return out


def detokenize(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[i] for i in ids)


def ingest_jsonl(path, split: str = "probe") -> tuple[TaskDataset, dict]:
    """Read ``{"question", "response", "answer"?}`` records.

    Text fields are whitespace-separated vocabulary tokens.  Bad lines are
    skipped and counted; the returned stats dict lists malformed line
    numbers and the count of records rejected for unknown tokens.
    """
    records, malformed, unknown = [], [], 0
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            q, r = obj["question"], obj["response"]
            if not isinstance(q, str) or not isinstance(r, str):
                raise TypeError("question/response must be strings")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            log.warning("%s:%d: malformed record (%s)", path, lineno, exc)
            malformed.append(lineno)
            continue
        try:
            qt, rt = tokenize(q), tokenize(r)
            ans = TOKEN_ID[obj["answer"]] if obj.get("answer") is not None else None
        except KeyError as exc:
            log.warning("%s:%d: unknown token %s", path, lineno, exc)
            unknown += 1
            continue
        if not qt or not rt:
            malformed.append(lineno)
            continue
        records.append(Record(tuple(qt), tuple(rt), ans))
    if not records:
        log.warning("%s: no records ingested", path)
    ds = TaskDataset(records=records, splits={split: list(range(len(records)))})
    return ds, {"malformed_lines": malformed, "unknown_token_records": unknown, "records": len(records)}


def export_jsonl(records: Sequence[Record], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            obj = {"question": detokenize(r.question), "response": detokenize(r.response)}
            if r.answer is not None:
                obj["answer"] = VOCAB[r.answer]
            fh.write(json.dumps(obj) + "\n")
    return path
