"""A small pre-norm decoder-only transformer with per-head instrumentation.

The model is written functionally: parameters live in a ``ModelParams``
container of named tensors and ``forward`` is a plain function.  That keeps
pruning (edit tensors), compensation (hook head outputs) and folding (write
the per-head bias slot) simple and explicit.

Conventions
-----------
* Linear weights are stored ``(out_features, in_features)``, so the *input
  dimension* of a matrix is its last axis.
* Head outputs ``z[l, h]`` are the attention-weighted value vectors, i.e.
  the per-head slices that are concatenated before ``W^O``.  The per-head
  bias slot ``layers.{l}.head_bias[h]`` is added to them before ``W^O``.
* The LM head is tied to the token embedding table.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .io import read_container, write_container

__all__ = [
    "PAD",
    "ModelConfig",
    "ModelParams",
    "CaptureRequest",
    "ActivationTrace",
    "TrainHyper",
    "TrainingDiverged",
    "init_params",
    "pad_batch",
    "forward",
    "capture",
    "logit_lens",
    "logit_difference",
    "inject_head_bias",
    "inject_ffn_bias",
    "train_dense",
    "save_checkpoint",
    "load_checkpoint",
    "PRUNABLE",
]

PAD = 0
NORM_EPS = 1e-10
PRUNABLE = ("wq", "wk", "wv", "wo", "w_in", "w_out")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    d_ffn: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def heads(self) -> list[tuple[int, int]]:
        return [(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def layer(self, l: int, name: str) -> torch.Tensor:
        return self.tensors[f"layers.{l}.{name}"]

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["tok_emb"].dtype

    def weight_names(self) -> list[str]:
        """Names of the prunable weight matrices, in layer order."""
        return [f"layers.{l}.{n}" for l in range(self.config.n_layers) for n in PRUNABLE]

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_params(config: ModelConfig) -> ModelParams:
    g = torch.Generator().manual_seed(config.seed)
    d, f, h, dh = config.d_model, config.d_ffn, config.n_heads, config.d_head

    def normal(*shape, std):
        return torch.randn(*shape, generator=g) * std

    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * config.n_layers)
    t = {
        "tok_emb": normal(config.vocab_size, d, std=0.1),
        "pos_emb": normal(config.max_seq_len, d, std=0.1),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        t[p + "attn_norm"] = torch.ones(d)
        t[p + "wq"] = normal(d, d, std=1.0 / math.sqrt(d))
        t[p + "wk"] = normal(d, d, std=1.0 / math.sqrt(d))
        t[p + "wv"] = normal(d, d, std=1.0 / math.sqrt(d))
        t[p + "wo"] = normal(d, d, std=out_std)
        t[p + "head_bias"] = torch.zeros(h, dh)
        t[p + "ffn_norm"] = torch.ones(d)
        t[p + "w_in"] = normal(f, d, std=1.0 / math.sqrt(d))
        t[p + "w_out"] = normal(d, f, std=1.0 / math.sqrt(f) / math.sqrt(2 * config.n_layers))
        t[p + "ffn_bias"] = torch.zeros(d)
    t["final_norm"] = torch.ones(d)
    return ModelParams(config, t)


def rms_norm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + NORM_EPS) * gain


# ---------------------------------------------------------------------------
# capture bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptureRequest:
    """Which activations to record during a forward pass.

    ``heads=None`` means every head.  ``positions`` is ``"last"`` (last
    non-padding token) or one explicit index per sample.
    """

    heads: tuple[tuple[int, int], ...] | None = None
    ffn_layers: tuple[int, ...] = ()
    positions: str | Sequence[int] = "last"


@dataclass
class ActivationTrace:
    """Per-site activations at one token position per sample.

    ``acts`` maps a site to an ``(N, d)`` float64 array.  Head sites are
    ``(layer, head)``; FFN output sites are ``(layer, "ffn")``.
    """

    acts: dict
    positions: np.ndarray
    policy: str
    sample_ids: tuple = field(default_factory=tuple)

    def __getitem__(self, site) -> np.ndarray:
        return self.acts[site]

    @property
    def sites(self) -> list:
        return list(self.acts)

    def __len__(self) -> int:
        return len(self.positions)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[torch.Tensor, torch.Tensor]:
    if len(seqs) == 0:
        raise ValueError("empty batch")
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    if int(lengths.min()) < 1:
        raise ValueError("empty sequence in batch")
    out = torch.full((len(seqs), int(lengths.max())), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def _as_batch(tokens, lengths):
    if isinstance(tokens, torch.Tensor):
        tokens = tokens.long()
        if tokens.ndim == 1:
            tokens = tokens[None]
        if lengths is None:
            lengths = torch.full((tokens.shape[0],), tokens.shape[1], dtype=torch.long)
        return tokens, torch.as_tensor(lengths, dtype=torch.long)
    toks, lens = pad_batch(tokens)
    return toks, lens if lengths is None else torch.as_tensor(lengths, dtype=torch.long)


HeadHook = Callable[[int, torch.Tensor], torch.Tensor]


def forward(
    params: ModelParams,
    tokens,
    *,
    lengths=None,
    capture: CaptureRequest | None = None,
    head_hook: HeadHook | None = None,
    ffn_hook: HeadHook | None = None,
    record_inputs: dict | None = None,
):
    """Causal forward pass.

    Returns ``(logits, trace)``; ``trace`` is None unless ``capture`` is
    given.  ``head_hook(l, z)`` receives the ``(B, T, H, d_head)`` head
    outputs of layer ``l`` (after the bias slot) and returns replacements;
    ``ffn_hook(l, y)`` does the same for the ``(B, T, d_model)`` FFN output.
    ``record_inputs``, if a dict, accumulates per-matrix input-feature sums
    of squares over non-padding positions (Wanda calibration).
    """
    cfg = params.config
    tokens, lengths = _as_batch(tokens, lengths)
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size:
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0].item()
        raise ValueError(f"token id {bad} out of range for vocab_size {cfg.vocab_size}")
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model

    valid = torch.arange(T)[None, :] < lengths[:, None]
    if capture is not None:
        if isinstance(capture.positions, str):
            if capture.positions != "last":
                raise ValueError(f"unknown position policy {capture.positions!r}")
            pos = lengths - 1
            policy = "last"
        else:
            pos = torch.as_tensor(list(capture.positions), dtype=torch.long)
            if pos.shape[0] != B:
                raise ValueError("need one capture position per sample")
            if bool(((pos < 0) | (pos >= lengths)).any()):
                raise ValueError("capture position outside a sequence")
            policy = "explicit"
        want_heads = set(cfg.heads if capture.heads is None else capture.heads)
        rows = torch.arange(B)
        acts = {}

    def record(name, x):
        if record_inputs is not None:
            flat = x[valid].detach().double()
            record_inputs[name] = record_inputs.get(name, 0) + flat.pow(2).sum(0)

    x = params["tok_emb"][tokens] + params["pos_emb"][:T][None]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        xn = rms_norm(x, params[p + "attn_norm"])
        record(p + "wq", xn)
        q = (xn @ params[p + "wq"].T).view(B, T, H, dh).transpose(1, 2)
        k = (xn @ params[p + "wk"].T).view(B, T, H, dh).transpose(1, 2)
        v = (xn @ params[p + "wv"].T).view(B, T, H, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~causal, float("-inf"))
        z = (scores.softmax(-1) @ v).transpose(1, 2)  # (B, T, H, dh)
        z = z + params[p + "head_bias"]
        if head_hook is not None:
            z = head_hook(l, z)
        if capture is not None:
            for h in range(H):
                if (l, h) in want_heads:
                    acts[(l, h)] = z[rows, pos, h].detach().double().numpy().copy()
        zc = z.reshape(B, T, D)
        record(p + "wo", zc)
        x = x + zc @ params[p + "wo"].T

        xn = rms_norm(x, params[p + "ffn_norm"])
        record(p + "w_in", xn)
        hidden = F.gelu(xn @ params[p + "w_in"].T)
        record(p + "w_out", hidden)
        y = hidden @ params[p + "w_out"].T + params[p + "ffn_bias"]
        if ffn_hook is not None:
            y = ffn_hook(l, y)
        if capture is not None and l in capture.ffn_layers:
            acts[(l, "ffn")] = y[rows, pos].detach().double().numpy().copy()
        x = x + y

    logits = rms_norm(x, params["final_norm"]) @ params["tok_emb"].T
    if record_inputs is not None:
        record_inputs["_count"] = record_inputs.get("_count", 0) + int(valid.sum())
    if capture is None:
        return logits, None
    trace = ActivationTrace(acts=acts, positions=pos.numpy().copy(), policy=policy)
    return logits, trace


def capture(
    params: ModelParams,
    seqs: Sequence[Sequence[int]],
    request: CaptureRequest,
    *,
    batch_size: int = 256,
    head_hook: HeadHook | None = None,
    sample_ids: Sequence | None = None,
) -> ActivationTrace:
    """Run ``forward`` over many sequences and stack the captured rows."""
    parts = []
    explicit = not isinstance(request.positions, str)
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = list(seqs[start : start + batch_size])
            req = request
            if explicit:
                req = dataclasses.replace(request, positions=list(request.positions[start : start + batch_size]))
            _, tr = forward(params, chunk, capture=req, head_hook=head_hook)
            parts.append(tr)
    if not parts:
        raise ValueError("no sequences to capture")
    acts = {site: np.concatenate([p.acts[site] for p in parts]) for site in parts[0].acts}
    ids = tuple(range(len(seqs))) if sample_ids is None else tuple(sample_ids)
    return ActivationTrace(
        acts=acts,
        positions=np.concatenate([p.positions for p in parts]),
        policy=parts[0].policy,
        sample_ids=ids,
    )


# ---------------------------------------------------------------------------
# head-level readouts
# ---------------------------------------------------------------------------


def _check_head(params: ModelParams, l: int, h: int) -> None:
    cfg = params.config
    if not (0 <= l < cfg.n_layers and 0 <= h < cfg.n_heads):
        raise ValueError(f"head ({l}, {h}) out of range for {cfg.n_layers}x{cfg.n_heads}")


def logit_lens(z, l: int, h: int, params: ModelParams) -> torch.Tensor:
    """Vocabulary logits implied by a head activation.

    ``z`` may be one ``(d_head,)`` vector or a batch ``(N, d_head)``.  The
    head's slice of ``W^O`` maps it into the residual stream, then the final
    RMS norm and the (tied) LM head are applied.
    """
    _check_head(params, l, h)
    dh = params.config.d_head
    z = torch.as_tensor(z, dtype=params.dtype)
    if z.shape[-1] != dh:
        raise ValueError(f"activation length {z.shape[-1]} != d_head {dh}")
    wo_h = params.layer(l, "wo")[:, h * dh : (h + 1) * dh]
    resid = z @ wo_h.T
    return rms_norm(resid, params["final_norm"]) @ params["tok_emb"].T


def logit_difference(logits, correct, incorrect):
    """``logits[correct] - logits[incorrect]`` along the last axis.

    ``correct``/``incorrect`` may be ints or per-row index arrays.
    """
    logits = torch.as_tensor(logits)
    c = torch.as_tensor(correct)
    w = torch.as_tensor(incorrect)
    vocab = logits.shape[-1]
    if bool((c == w).any()):
        raise ValueError("correct and incorrect token ids must differ")
    if bool(((c < 0) | (c >= vocab) | (w < 0) | (w >= vocab)).any()):
        raise ValueError("token id out of range")
    if c.ndim == 0:
        return logits[..., c] - logits[..., w]
    return logits.gather(-1, c[:, None]).squeeze(-1) - logits.gather(-1, w[:, None]).squeeze(-1)


def inject_head_bias(params: ModelParams, l: int, h: int, c) -> ModelParams:
    """Return a copy of ``params`` with ``c`` added to the (l, h) bias slot.

    Injection accumulates; on a model whose slots are still zero that is the
    same as setting the slot.  No weight matrix is touched.
    """
    _check_head(params, l, h)
    c = torch.as_tensor(c, dtype=params.dtype)
    if c.shape != (params.config.d_head,):
        raise ValueError(f"bias must have shape ({params.config.d_head},), got {tuple(c.shape)}")
    if not bool(torch.isfinite(c).all()):
        raise ValueError("bias has non-finite entries")
    out = ModelParams(params.config, dict(params.tensors))
    name = f"layers.{l}.head_bias"
    slot = out.tensors[name].clone()
    slot[h] += c
    out.tensors[name] = slot
    return out


def inject_ffn_bias(params: ModelParams, l: int, c) -> ModelParams:
    if not 0 <= l < params.config.n_layers:
        raise ValueError(f"layer {l} out of range")
    c = torch.as_tensor(c, dtype=params.dtype)
    if c.shape != (params.config.d_model,):
        raise ValueError(f"bias must have shape ({params.config.d_model},), got {tuple(c.shape)}")
    out = ModelParams(params.config, dict(params.tensors))
    name = f"layers.{l}.ffn_bias"
    out.tensors[name] = out.tensors[name] + c
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``snapshot`` holds the last finite state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 3e-3
    epochs: int = 40
    batch_size: int = 32
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


def lm_loss(logits: torch.Tensor, tokens: torch.Tensor, lengths: torch.Tensor, loss_from=None) -> torch.Tensor:
    """Mean next-token cross-entropy over non-padding targets.

    ``loss_from[i]`` optionally restricts sample ``i`` to targets at token
    index ``>= loss_from[i]``.
    """
    T = tokens.shape[1]
    idx = torch.arange(1, T)[None, :]
    mask = idx < lengths[:, None]
    if loss_from is not None:
        mask &= idx >= torch.as_tensor(loss_from)[:, None]
    ce = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), reduction="none")
    ce = ce.view(tokens.shape[0], T - 1)
    return (ce * mask).sum() / mask.sum().clamp(min=1)


def train_dense(
    config: ModelConfig,
    sequences: Sequence[Sequence[int]],
    hyper: TrainHyper = TrainHyper(),
    loss_from: Sequence[int] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[ModelParams, list[float]]:
    """Train from scratch with Adam; returns params and per-epoch mean loss."""
    if len(sequences) == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(hyper.seed)
    params = init_params(config)
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.tensors.items() if not k.endswith(("head_bias", "ffn_bias"))}
    live = ModelParams(config, {**params.tensors, **leaves})
    opt = torch.optim.AdamW(leaves.values(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    tokens, lengths = pad_batch(sequences)
    lf = None if loss_from is None else torch.as_tensor(list(loss_from))
    n = len(sequences)
    g = torch.Generator().manual_seed(hyper.seed)
    total_steps = hyper.epochs * math.ceil(n / hyper.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 50) * max(0.0, 1 - s / total_steps))
    history = []
    for epoch in range(hyper.epochs):
        perm = torch.randperm(n, generator=g)
        losses = []
        for start in range(0, n, hyper.batch_size):
            b = perm[start : start + hyper.batch_size]
            bl = lengths[b]
            bt = tokens[b, : int(bl.max())]
            logits, _ = forward(live, bt, lengths=bl)
            loss = lm_loss(logits, bt, bl, None if lf is None else lf[b])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", snapshot=_freeze(live))
            opt.zero_grad()
            loss.backward()
            if hyper.grad_clip:
                torch.nn.utils.clip_grad_norm_(leaves.values(), hyper.grad_clip)
            opt.step()
            sched.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{hyper.epochs} loss {history[-1]:.4f}")
    return _freeze(live), history


def _freeze(p: ModelParams) -> ModelParams:
    return ModelParams(p.config, {k: v.detach().clone() for k, v in p.tensors.items()})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra: dict | None = None):
    meta = {"kind": "model", "config": params.config.to_dict()}
    if extra:
        meta["extra"] = extra
    tensors = {k: v.detach().to(torch.float32).numpy() for k, v in params.tensors.items()}
    return write_container(path, meta, tensors)


def load_checkpoint(path) -> ModelParams:
    meta, tensors = read_container(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    config = ModelConfig(**meta["config"])
    ref = init_params(dataclasses.replace(config))
    missing = set(ref.tensors) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    out = {}
    for k, v in ref.tensors.items():
        arr = tensors[k]
        if tuple(arr.shape) != tuple(v.shape):
            raise ValueError(f"{path}: tensor {k} has shape {arr.shape}, expected {tuple(v.shape)}")
        out[k] = torch.from_numpy(arr)
    return ModelParams(config, out)
