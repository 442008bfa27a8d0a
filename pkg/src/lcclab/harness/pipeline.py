"""End-to-end recovery pipeline with content-addressed stage caching.

Stages run in order::

    train -> prune -> capture -> decompose -> probe -> compensate -> fold -> eval

Each stage writes into ``<out>/<stage>-<key>/`` where ``key`` hashes every
config field the stage depends on plus the key of the stage before it.  A
stage whose directory holds a ``done.json`` marker is loaded, not rerun.
Freshly computed artifacts are written and read back before use, so a
cached run and a cold run see the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..io import read_container, write_container
from ..lcc import LccHyper, RecoveryPlan, fold_components, init_learned_component, load_plan, save_plan, train_components
from ..linalg import SvdFactors
from ..lossdiff import SvdComponents, assemble_loss_matrix, capture_pair, decompose, estimate_lost_component, head_recovery_scan, write_table
from ..model import ActivationTrace, TrainHyper, load_checkpoint, save_checkpoint, train_dense
from ..probing import ProbeHyper, build_contrastive_dataset, build_probe_pairs, probe_features, rank_heads, select_heads_by_metric, train_probe
from ..pruning import (
    PruneMask,
    calibration_norms,
    head_scores_from_wanda,
    load_mask,
    prune_semi_structured,
    prune_structured_heads,
    prune_unstructured,
    save_mask,
    sparsity_report,
    wanda_scores,
)
from .config import ExperimentConfig, config_hash
from .evaluate import evaluate
from .tasks import Record, TaskDataset, gen_synthetic_task, ingest_jsonl

log = logging.getLogger(__name__)

__all__ = ["STAGES", "StageError", "Pipeline", "run_pipeline", "sweep", "dump_json"]

STAGES = ("train", "prune", "capture", "decompose", "probe", "compensate", "fold", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _site_str(site) -> str:
    return f"{site[0]}.{site[1]}"


def _parse_site(s: str):
    a, b = s.split(".")
    return (int(a), b if b == "ffn" else int(b))


@dataclass
class StageResult:
    name: str
    key: str
    dir: Path
    cached: bool
    value: object = None


@dataclass
class Pipeline:
    config: ExperimentConfig
    logger: Callable[[str], None] | None = None
    results: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.config.out)
        self._dataset: TaskDataset | None = None

    # -- helpers ----------------------------------------------------------

    def _say(self, msg: str) -> None:
        if self.logger is not None:
            self.logger(msg)
        else:
            log.info(msg)

    def _key(self, stage: str, deps: dict) -> str:
        prev = STAGES.index(stage) - 1
        parent = self.results[STAGES[prev]].key if prev >= 0 else None
        return config_hash({"stage": stage, "parent": parent, "deps": deps})

    def _run(self, stage: str, deps: dict, compute: Callable[[Path], None], load: Callable[[Path], object]):
        if stage in self.results:
            return self.results[stage]
        if STAGES.index(stage) > 0:
            self.run_until(STAGES[STAGES.index(stage) - 1])
        key = self._key(stage, deps)
        d = self.root / f"{stage}-{key}"
        marker = d / "done.json"
        cached = marker.is_file()
        try:
            if cached:
                self._say(f"[{stage}] cached {d}")
            else:
                self._say(f"[{stage}] running -> {d}")
                d.mkdir(parents=True, exist_ok=True)
                compute(d)
                dump_json({"stage": stage, "key": key, "deps": deps}, marker)
            value = load(d)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(stage, exc) from exc
        res = StageResult(stage, key, d, cached, value)
        self.results[stage] = res
        return res

    def run_until(self, stage: str) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return getattr(self, f"stage_{stage}")()

    # -- data ---------------------------------------------------------------

    @property
    def dataset(self) -> TaskDataset:
        if self._dataset is None:
            c = self.config.data
            self._dataset = gen_synthetic_task(c.seed, c.n_samples, c.min_len, c.max_len)
        return self._dataset

    def _records(self, which: str) -> list[Record]:
        c = self.config.data
        path = {"probe": c.probe_jsonl, "recovery": c.recovery_jsonl, "held_out": c.eval_jsonl}[which]
        if path is not None:
            ds, stats = ingest_jsonl(path, split=which)
            if stats["malformed_lines"] or stats["unknown_token_records"]:
                self._say(f"[data] {path}: {stats}")
            recs = ds.split(which)
        else:
            recs = self.dataset.split(which)
        if which == "recovery":
            recs = recs[: c.recovery_samples]
        if not recs:
            raise ValueError(f"split {which!r} is empty")
        return recs

    def _data_deps(self, *which) -> dict:
        c = self.config.data
        out = {"seed": c.seed, "n_samples": c.n_samples, "min_len": c.min_len, "max_len": c.max_len}
        for w in which:
            path = {"probe": c.probe_jsonl, "recovery": c.recovery_jsonl, "held_out": c.eval_jsonl}[w]
            out[w] = None if path is None else _file_digest(path)
        if "recovery" in which:
            out["recovery_samples"] = c.recovery_samples
        return out

    # -- stages -------------------------------------------------------------

    def stage_train(self) -> StageResult:
        cfg = self.config
        if cfg.train.checkpoint is not None:
            deps = {"checkpoint": _file_digest(cfg.train.checkpoint)}
        else:
            deps = {"model": cfg.model.to_dict(), "train": asdict(cfg.train), "data": self._data_deps()}

        def compute(d):
            if cfg.train.checkpoint is not None:
                params = load_checkpoint(cfg.train.checkpoint)
                history = []
            else:
                t = cfg.train
                seqs = [r.sequence for r in self.dataset.split("train")]
                hyper = TrainHyper(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed)
                params, history = train_dense(cfg.model, seqs, hyper, log=lambda m: self._say(f"[train] {m}"))
            save_checkpoint(params, d / "dense.ckpt")
            dump_json({"loss_history": history}, d / "history.json")

        return self._run("train", deps, compute, lambda d: load_checkpoint(d / "dense.ckpt"))

    @property
    def dense(self):
        return self.run_until("train").value

    def stage_prune(self) -> StageResult:
        cfg = self.config
        p = cfg.prune
        deps = {"prune": {**asdict(p), "matrices": list(p.matrices)}, "seed": cfg.seed, "data": self._data_deps()}

        def compute(d):
            dense = self.dense
            train = self.dataset.split("train")
            rng = np.random.default_rng(cfg.seed)
            idx = np.sort(rng.choice(len(train), min(p.calib_samples, len(train)), replace=False))
            calib = [train[i].sequence for i in idx]
            scores = wanda_scores(dense, calibration_norms(dense, calib))
            if p.scheme == "unstructured":
                pruned, mask = prune_unstructured(dense, p.ratio, scores, kinds=p.matrices)
            elif p.scheme == "semi_structured":
                pruned, mask = prune_semi_structured(dense, p.n, p.m, scores, kinds=p.matrices)
            else:
                pruned, mask = prune_structured_heads(dense, p.ratio, head_scores_from_wanda(dense, scores))
            save_checkpoint(pruned, d / "pruned.ckpt")
            save_mask(mask, d / "mask.bin")

        def load(d):
            return load_checkpoint(d / "pruned.ckpt"), load_mask(d / "mask.bin")

        return self._run("prune", deps, compute, load)

    @property
    def pruned(self):
        return self.run_until("prune").value[0]

    @property
    def mask(self) -> PruneMask:
        return self.run_until("prune").value[1]

    def stage_capture(self) -> StageResult:
        cfg = self.config
        ffn = cfg.lcc.target == "ffn_output"
        deps = {"data": self._data_deps("probe"), "ffn": ffn}

        def compute(d):
            qs = [r.question for r in self._records("probe")]
            layers = tuple(range(cfg.model.n_layers)) if ffn else ()
            td, tp = capture_pair(self.dense, self.pruned, qs, ffn_layers=layers)
            tensors = {}
            for site in td.sites:
                tensors[f"dense.{_site_str(site)}"] = td[site]
                tensors[f"pruned.{_site_str(site)}"] = tp[site]
            tensors["positions"] = td.positions.astype(np.float64)
            write_container(d / "traces.bin", {"kind": "traces", "policy": td.policy}, tensors, dtype="f64")

        def load(d):
            meta, t = read_container(d / "traces.bin")
            pos = t.pop("positions").astype(np.int64)
            out = {}
            for which in ("dense", "pruned"):
                acts = {_parse_site(k.split(".", 1)[1]): v for k, v in t.items() if k.startswith(which + ".")}
                out[which] = ActivationTrace(acts, pos, meta["policy"])
            return out["dense"], out["pruned"]

        return self._run("capture", deps, compute, load)

    def stage_decompose(self) -> StageResult:
        def compute(d):
            td, tp = self.run_until("capture").value
            tensors = {}
            for site in td.sites:
                comp = decompose(assemble_loss_matrix(td, tp, site))
                s = _site_str(site)
                tensors[f"{s}.U"] = comp.factors.U
                tensors[f"{s}.sigma"] = comp.factors.sigma
                tensors[f"{s}.V"] = comp.factors.V
                tensors[f"{s}.alpha_bar"] = comp.alpha_bar
            write_container(d / "components.bin", {"kind": "components"}, tensors, dtype="f64")

        def load(d):
            _, t = read_container(d / "components.bin")
            sites = sorted({k.rsplit(".", 1)[0] for k in t}, key=lambda s: str(_parse_site(s)))
            out = {}
            for s in sites:
                f = SvdFactors(t[f"{s}.U"], t[f"{s}.sigma"], t[f"{s}.V"])
                out[_parse_site(s)] = SvdComponents(f, t[f"{s}.alpha_bar"])
            return out

        return self._run("decompose", deps={}, compute=compute, load=load)

    @property
    def components(self) -> dict:
        return self.run_until("decompose").value

    def _n_select(self, n: int) -> int:
        return math.ceil(self.config.probe.fraction * n)

    def stage_probe(self) -> StageResult:
        cfg = self.config
        pc = cfg.probe
        deps = {"probe": asdict(pc), "seed": cfg.seed, "target": cfg.lcc.target}

        def compute(d):
            comps = self.components
            rows = []
            if cfg.lcc.target == "ffn_output":
                # no probe for FFN sites: take the most damaged layers
                ffn = sorted(s for s in comps if s[1] == "ffn")
                td, tp = self.run_until("capture").value
                dmg = {s: float(np.mean(np.sum((td[s] - tp[s]) ** 2, axis=1))) for s in ffn}
                selected = sorted(sorted(ffn, key=lambda s: (-dmg[s], s))[: self._n_select(len(ffn))])
            elif pc.selector == "probe":
                recs = self._records("probe")
                tuples = build_contrastive_dataset([(r.question, r.response) for r in recs], self.dense)
                feats = probe_features(tuples, self.dense, self.pruned)
                hyper = ProbeHyper(lr=pc.lr, epochs=pc.epochs, train_fraction=pc.train_fraction, seed=cfg.seed)
                records = []
                for lh in cfg.model.heads:
                    c = estimate_lost_component(comps[lh], pc.k).c
                    pairs = build_probe_pairs(tuples, self.dense, self.pruned, *lh, c, features=feats)
                    records.append(train_probe(pairs, hyper, site=lh))
                selected = rank_heads(records, pc.fraction)
                rows = [(r.layer, r.head, r.accuracy, int(r.site in selected)) for r in records]
            elif pc.selector == "random":
                heads = cfg.model.heads
                rng = np.random.default_rng([cfg.seed, 1])
                pick = rng.choice(len(heads), self._n_select(len(heads)), replace=False)
                selected = sorted(heads[i] for i in pick)
            else:
                td, tp = self.run_until("capture").value
                selected = select_heads_by_metric(td, tp, pc.selector, pc.fraction, self.dense, self.pruned)
            write_table(d / "probe.csv", ["layer", "head", "accuracy", "selected"], rows)
            dump_json({"selected": [_site_str(s) for s in selected]}, d / "selection.json")

        def load(d):
            obj = json.loads((d / "selection.json").read_text())
            return [_parse_site(s) for s in obj["selected"]]

        return self._run("probe", deps, compute, load)

    @property
    def selected(self) -> list:
        return self.run_until("probe").value

    def stage_compensate(self) -> StageResult:
        cfg = self.config
        lc = cfg.lcc
        deps = {"lcc": asdict(lc), "seed": cfg.seed, "data": self._data_deps("recovery")}

        def compute(d):
            comps = self.components
            sites = self.selected
            if not any((~m).any() for m in self.mask.masks.values()):
                self._say("[compensate] nothing was pruned; plan left empty")
                sites = []
            plan = RecoveryPlan(
                {s: init_learned_component(comps[s], s, lc.use_directions, lc.use_bias, lc.warm_start) for s in sites},
                target=lc.target,
            )
            recs = self._records("recovery")
            hyper = LccHyper(lr=lc.lr, epochs=lc.epochs, batch_size=lc.batch_size, seed=cfg.seed, loss_on=lc.loss_on)
            plan = train_components(
                self.pruned,
                plan,
                [r.sequence for r in recs],
                hyper,
                loss_from=[len(r.question) for r in recs],
                log=lambda m: self._say(f"[compensate] {m}"),
            )
            save_plan(plan, d / "plan.bin")

        return self._run("compensate", deps, compute, lambda d: load_plan(d / "plan.bin"))

    @property
    def plan(self) -> RecoveryPlan:
        return self.run_until("compensate").value

    def stage_fold(self) -> StageResult:
        def compute(d):
            save_checkpoint(fold_components(self.pruned, self.plan), d / "folded.ckpt")

        return self._run("fold", {}, compute, lambda d: load_checkpoint(d / "folded.ckpt"))

    def stage_eval(self) -> StageResult:
        cfg = self.config
        deps = {"scan": asdict(cfg.scan), "data": self._data_deps("held_out", "probe")}

        def compute(d):
            held = self._records("held_out")
            folded = self.run_until("fold").value
            dense_ev, pruned_ev, rec_ev = (evaluate(m, held) for m in (self.dense, self.pruned, folded))
            probe_recs = [r for r in self._records("probe") if r.answer is not None]
            table_rows = []
            if probe_recs:
                sc = cfg.scan
                scan = head_recovery_scan(
                    self.dense,
                    self.pruned,
                    [r.question for r in probe_recs],
                    [r.answer for r in probe_recs],
                    [r.wrong_answer for r in probe_recs],
                    k=sc.k,
                    scale=sc.scale,
                    component=sc.component,
                )
                for (l, h), v in sorted(scan.items()):
                    table_rows.append((l, h, v["lambda_dense"], v["lambda_pruned"], v["lambda_recovered"], v["logit_gain"]))
            write_table(
                d / "delta_lambda.csv",
                ["layer", "head", "lambda_dense", "lambda_pruned", "lambda_recovered", "logit_gain"],
                table_rows,
            )
            heads = [s for s in self.plan.sites if s[1] != "ffn"]
            sparsity = sparsity_report(folded, self.mask, compensated_heads=heads)
            report = {
                "accuracy": rec_ev["accuracy"],
                "perplexity": rec_ev["perplexity"],
                "dense": dense_ev,
                "pruned": pruned_ev,
                "recovered": rec_ev,
                "gap_recovered": _gap(dense_ev["accuracy"], pruned_ev["accuracy"], rec_ev["accuracy"]),
                "selected_sites": [_site_str(s) for s in self.selected],
                "compensated_sites": [_site_str(s) for s in self.plan.sites],
                "sparsity": sparsity.to_dict(),
                "tables": {
                    "delta_lambda": f"{d.name}/delta_lambda.csv",
                    "probe": f"{self.results['probe'].dir.name}/probe.csv",
                },
                "stage_keys": {s: self.results[s].key for s in STAGES if s in self.results},
                "config": cfg.to_dict(),
                "config_hash": config_hash({k: v for k, v in cfg.to_dict().items() if k != "out"}),
            }
            report["stage_keys"]["eval"] = d.name.split("-", 1)[1]
            dump_json(report, d / "report.json")
            (d / "report.txt").write_text(format_report(report))

        return self._run("eval", deps, compute, lambda d: json.loads((d / "report.json").read_text()))


def _gap(dense: float, pruned: float, recovered: float):
    gap = dense - pruned
    return (recovered - pruned) / gap if gap > 0 else None


def format_report(report: dict) -> str:
    lines = [f"{'model':<10} {'accuracy':>9} {'perplexity':>11}"]
    for name in ("dense", "pruned", "recovered"):
        ev = report[name]
        lines.append(f"{name:<10} {ev['accuracy']:>9.4f} {ev['perplexity']:>11.4f}")
    g = report["gap_recovered"]
    lines.append(f"gap recovered: {'n/a' if g is None else f'{g:.3f}'}")
    lines.append(f"sites: {' '.join(report['selected_sites'])}")
    sp = report["sparsity"]
    lines.append(f"sparsity: {sp['global_sparsity']:.4f}  max overhead: {sp['max_overhead']:.6f}")
    return "\n".join(lines) + "\n"


def run_pipeline(config: ExperimentConfig, until: str = "eval", logger=None) -> Pipeline:
    """Run every stage up to ``until``; the report is ``pipe.results['eval'].value``."""
    torch.set_num_threads(1)  # fixed reduction order for byte-identical reports
    pipe = Pipeline(config, logger=logger)
    pipe.run_until(until)
    return pipe


def sweep(config: ExperimentConfig, axis: str, values, logger=None) -> list[dict]:
    """One pipeline run per value of ``k`` or ``head_fraction``."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    field_name = {"k": "k", "head_fraction": "fraction"}.get(axis)
    if field_name is None:
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for v in values:
        cfg = config.replace(probe={field_name: v})
        report = run_pipeline(cfg, logger=logger).results["eval"].value
        rows.append(
            {
                "value": v,
                "accuracy": report["accuracy"],
                "perplexity": report["perplexity"],
                "max_overhead": report["sparsity"]["max_overhead"],
            }
        )
    name = f"sweep-{axis}-{config_hash({'config': config.to_dict(), 'axis': axis, 'values': values})}.csv"
    write_table(Path(config.out) / name, ["value", "accuracy", "perplexity", "max_overhead"], [tuple(r.values()) for r in rows])
    return rows
