"""Learned lost-component compensation.

Each compensated site gets ``c = V @ beta + b`` where ``V`` holds the fixed
right singular vectors of the site's activation-loss matrix, ``beta`` are
trainable magnitudes and ``b`` a trainable free bias.  ``c`` is a constant
added to the site's output at every position, so after training it folds
into the model's bias slots and inference cost is unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .io import read_container, write_container
from .linalg import complete_basis
from .lossdiff import SvdComponents
from .model import ModelParams, TrainingDiverged, forward, inject_ffn_bias, inject_head_bias, lm_loss, pad_batch

__all__ = [
    "LearnedComponent",
    "LccHyper",
    "RecoveryPlan",
    "init_learned_component",
    "compose_component",
    "recovery_forward",
    "train_components",
    "fold_components",
    "gradient_check",
    "save_plan",
    "load_plan",
]


def _is_ffn(site) -> bool:
    return site[1] == "ffn"


@dataclass
class LearnedComponent:
    site: tuple
    V: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    use_directions: bool = True
    use_bias: bool = True

    def __post_init__(self):
        self.V = np.array(self.V, dtype=np.float64)
        self.V.setflags(write=False)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        d = self.V.shape[0]
        if self.V.shape != (d, d) or self.beta.shape != (d,) or self.b.shape != (d,):
            raise ValueError(f"inconsistent component shapes V{self.V.shape} beta{self.beta.shape} b{self.b.shape}")

    @property
    def dim(self) -> int:
        return self.V.shape[0]


def init_learned_component(
    comp: SvdComponents,
    site,
    use_directions: bool = True,
    use_bias: bool = True,
    warm_start: bool = True,
) -> LearnedComponent:
    """Directions from the loss-matrix SVD, magnitudes warm-started at the mean coefficients."""
    V = complete_basis(comp.V)
    beta = np.zeros(V.shape[0])
    if warm_start:
        r = comp.alpha_bar.shape[0]
        beta[:r] = comp.alpha_bar
    return LearnedComponent(tuple(site), V, beta, np.zeros(V.shape[0]), use_directions, use_bias)


def compose_component(lc: LearnedComponent) -> np.ndarray:
    c = np.zeros(lc.dim)
    if lc.use_directions:
        c = c + lc.V @ lc.beta
    if lc.use_bias:
        c = c + lc.b
    return c


@dataclass(frozen=True)
class LccHyper:
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    loss_on: str = "all"  # or "response"


@dataclass
class RecoveryPlan:
    components: dict = field(default_factory=dict)
    target: str = "attention_head"
    hyper: LccHyper = field(default_factory=LccHyper)
    loss_curve: list = field(default_factory=list)

    @property
    def sites(self) -> list:
        return list(self.components)

    def copy(self) -> "RecoveryPlan":
        return copy.deepcopy(self)


def _check_sites(params: ModelParams, plan: RecoveryPlan) -> None:
    cfg = params.config
    for site in plan.components:
        l = site[0]
        ok = 0 <= l < cfg.n_layers and (_is_ffn(site) or 0 <= site[1] < cfg.n_heads)
        if not ok:
            raise ValueError(f"site {site} out of range for the model")


def _hooks(plan: RecoveryPlan, vectors: dict):
    by_layer_head: dict = {}
    by_layer_ffn: dict = {}
    for site, vec in vectors.items():
        if _is_ffn(site):
            by_layer_ffn[site[0]] = vec
        else:
            by_layer_head.setdefault(site[0], []).append((site[1], vec))

    def head_hook(l, z):
        if l not in by_layer_head:
            return z
        add = torch.zeros_like(z[0, 0])
        for h, vec in by_layer_head[l]:
            add = add.index_add(0, torch.tensor([h]), vec.to(z.dtype)[None])
        return z + add

    def ffn_hook(l, y):
        if l not in by_layer_ffn:
            return y
        return y + by_layer_ffn[l].to(y.dtype)

    return head_hook, ffn_hook


def recovery_forward(pruned: ModelParams, plan: RecoveryPlan, tokens, lengths=None) -> torch.Tensor:
    """Pruned forward with each site's composed component added to its output."""
    _check_sites(pruned, plan)
    vecs = {s: torch.from_numpy(compose_component(lc)) for s, lc in plan.components.items()}
    head_hook, ffn_hook = _hooks(plan, vecs)
    logits, _ = forward(pruned, tokens, lengths=lengths, head_hook=head_hook, ffn_hook=ffn_hook)
    return logits


class _Trainable:
    """Torch leaves for the enabled beta/b of every site."""

    def __init__(self, plan: RecoveryPlan, dtype=torch.float64):
        self.plan = plan
        self.V, self.beta, self.b = {}, {}, {}
        for site, lc in plan.components.items():
            self.V[site] = torch.from_numpy(np.array(lc.V)).to(dtype)
            self.beta[site] = torch.tensor(lc.beta, dtype=dtype, requires_grad=lc.use_directions)
            self.b[site] = torch.tensor(lc.b, dtype=dtype, requires_grad=lc.use_bias)

    def leaves(self) -> list[torch.Tensor]:
        out = []
        for site, lc in self.plan.components.items():
            if lc.use_directions:
                out.append(self.beta[site])
            if lc.use_bias:
                out.append(self.b[site])
        return out

    def vectors(self) -> dict:
        out = {}
        for site, lc in self.plan.components.items():
            c = torch.zeros(lc.dim, dtype=self.V[site].dtype)
            if lc.use_directions:
                c = c + self.V[site] @ self.beta[site]
            if lc.use_bias:
                c = c + self.b[site]
            out[site] = c
        return out

    def export(self) -> RecoveryPlan:
        new = self.plan.copy()
        for site, lc in new.components.items():
            # frozen parts keep their exact float64 values
            if lc.use_directions:
                lc.beta = self.beta[site].detach().double().numpy().copy()
            if lc.use_bias:
                lc.b = self.b[site].detach().double().numpy().copy()
        return new


def _loss(pruned, trainable, plan, tokens, lengths, loss_from):
    head_hook, ffn_hook = _hooks(plan, trainable.vectors())
    logits, _ = forward(pruned, tokens, lengths=lengths, head_hook=head_hook, ffn_hook=ffn_hook)
    return lm_loss(logits, tokens, lengths, loss_from)


def train_components(
    pruned: ModelParams,
    plan: RecoveryPlan,
    seqs: Sequence[Sequence[int]],
    hyper: LccHyper | None = None,
    loss_from: Sequence[int] | None = None,
    log: Callable[[str], None] | None = None,
) -> RecoveryPlan:
    """Adam on next-token cross-entropy with only beta and b trainable.

    ``loss_from`` gives, per sequence, the first target index that counts
    toward the loss; it is used when ``hyper.loss_on == "response"``.
    """
    hyper = hyper or plan.hyper
    if len(seqs) == 0:
        raise ValueError("recovery set is empty")
    _check_sites(pruned, plan)
    frozen = pruned.to(torch.float32)
    tr = _Trainable(plan, dtype=torch.float32)
    leaves = tr.leaves()
    out = plan.copy()
    out.hyper = hyper
    if hyper.epochs == 0 or not leaves:
        return out
    tokens, lengths = pad_batch(seqs)
    lf = None
    if hyper.loss_on == "response":
        if loss_from is None:
            raise ValueError("loss_on='response' needs loss_from")
        lf = torch.as_tensor(list(loss_from))
    elif hyper.loss_on != "all":
        raise ValueError(f"unknown loss_on {hyper.loss_on!r}")
    opt = torch.optim.Adam(leaves, lr=hyper.lr)
    g = torch.Generator().manual_seed(hyper.seed)
    n = len(seqs)
    curve = []
    last_good = plan.copy()
    for epoch in range(hyper.epochs):
        perm = torch.randperm(n, generator=g)
        losses = []
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            bl = lengths[idx]
            bt = tokens[idx, : int(bl.max())]
            loss = _loss(frozen, tr, plan, bt, bl, None if lf is None else lf[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite recovery loss at epoch {epoch}", snapshot=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        last_good = tr.export()
        if log is not None:
            log(f"lcc epoch {epoch + 1}/{hyper.epochs} loss {curve[-1]:.4f}")
    out = tr.export()
    out.hyper = hyper
    out.loss_curve = plan.loss_curve + curve
    return out


def fold_components(pruned: ModelParams, plan: RecoveryPlan) -> ModelParams:
    """Write every composed component into the model's bias slots."""
    _check_sites(pruned, plan)
    out = pruned
    for site, lc in plan.components.items():
        c = compose_component(lc)
        if _is_ffn(site):
            out = inject_ffn_bias(out, site[0], c)
        else:
            out = inject_head_bias(out, site[0], site[1], c)
    return out


def gradient_check(
    plan: RecoveryPlan,
    pruned: ModelParams,
    seqs: Sequence[Sequence[int]],
    loss_from: Sequence[int] | None = None,
    eps: float = 1e-4,
    loss_fn: Callable | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences.

    Runs in float64 over every enabled beta/b scalar.  The relative error of
    one scalar is ``|a - n| / max(|a|, |n|, floor)``.  ``loss_fn(logits,
    tokens, lengths)`` overrides the default next-token cross-entropy.
    """
    p64 = pruned.to(torch.float64)
    tokens, lengths = pad_batch(seqs)
    lf = None if loss_from is None else torch.as_tensor(list(loss_from))

    def evaluate(tr):
        head_hook, ffn_hook = _hooks(plan, tr.vectors())
        logits, _ = forward(p64, tokens, lengths=lengths, head_hook=head_hook, ffn_hook=ffn_hook)
        if loss_fn is not None:
            return loss_fn(logits, tokens, lengths)
        return lm_loss(logits, tokens, lengths, lf)

    tr = _Trainable(plan, dtype=torch.float64)
    loss = evaluate(tr)
    leaves = tr.leaves()
    if not leaves:
        return 0.0
    grads = torch.autograd.grad(loss, leaves)
    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            for i in range(leaf.numel()):
                orig = leaf[i].item()
                leaf[i] = orig + eps
                up = evaluate(tr).item()
                leaf[i] = orig - eps
                down = evaluate(tr).item()
                leaf[i] = orig
                num = (up - down) / (2 * eps)
                ana = grad[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


def _site_key(site) -> str:
    return f"{site[0]}.{site[1]}"


def save_plan(plan: RecoveryPlan, path):
    manifest = []
    tensors = {}
    for site, lc in plan.components.items():
        key = _site_key(site)
        manifest.append({"site": list(site), "use_directions": lc.use_directions, "use_bias": lc.use_bias})
        tensors[f"{key}.V"] = lc.V
        tensors[f"{key}.beta"] = lc.beta
        tensors[f"{key}.b"] = lc.b
    meta = {
        "kind": "plan",
        "target": plan.target,
        "sites": manifest,
        "hyper": plan.hyper.__dict__,
        "loss_curve": [float(x) for x in plan.loss_curve],
    }
    return write_container(path, meta, tensors, dtype="f64")


def load_plan(path) -> RecoveryPlan:
    meta, tensors = read_container(path)
    if meta.get("kind") != "plan":
        raise ValueError(f"{path} is not a recovery plan")
    comps = {}
    for entry in meta["sites"]:
        site = tuple(entry["site"])
        key = _site_key(site)
        comps[site] = LearnedComponent(
            site,
            tensors[f"{key}.V"].astype(np.float64),
            tensors[f"{key}.beta"].astype(np.float64),
            tensors[f"{key}.b"].astype(np.float64),
            entry["use_directions"],
            entry["use_bias"],
        )
    return RecoveryPlan(comps, meta["target"], LccHyper(**meta["hyper"]), meta["loss_curve"])
