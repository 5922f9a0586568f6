"""End-to-end experiment stages behind the command line.

Each stage reads what earlier stages wrote under the output directory and
writes its own artifacts there. Every artifact carries the config hash and
the master seed so that a file can be traced back to the run that made it.

Layout::

    data/          train.jsonl, test.jsonl, manifest.json
    models/        base.json, finetuned.json
    logs/          train.csv, finetune.csv
    explain/       attributions-{model}.jsonl, ensemble-{scenario}.jsonl, cost.jsonl
    eval/          table4..table8 CSVs, curve CSVs and SVG charts
    ablate/        ablation.csv
    report.md
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from finer.config import ExperimentConfig
from finer.ensemble import explain_ensemble, naive_ensemble, scenario_explainers
from finer.explainers import (
    ICAttribution, InfeasibleError, BlackBox, explain_ic, lime_explain, lime_feature_explain, neighbors_for,
    shapley_feature_explain, sub_seed,
)
from finer.finetune import finetune
from finer.ic import BaselineSet, Encoded, Masker, truth_in_indicator
from finer.metrics import amp, global_fidelity, mpd_k, roc_auc
from finer.net import ARCHITECTURES, CheckpointError, Model, fit, load_checkpoint, predict_proba, save_checkpoint
from finer.task import Dataset, Vectorizer, generate_dataset, load_dataset, save_dataset

log = logging.getLogger(__name__)

MODELS = ("base", "finetuned")


class DataError(RuntimeError):
    """A required input artifact is missing or unreadable."""


# --- small IO helpers ----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return "" if v is None else str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], cfg: ExperimentConfig) -> None:
    """CSV with ``config_hash`` and ``seed`` appended to every row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header) + ["config_hash", "seed"])
    for row in rows:
        w.writerow([_fmt(v) for v in row] + [cfg.hash(), cfg.seed])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing {path}; run the stage that produces it first")
    with path.open() as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records))


def read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing {path}; run `explain` first")
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt record file {path}: {exc}") from exc


def _pmap(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _pct(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return 100.0 * (after - before) / abs(before)


# --- run context ---------------------------------------------------------------

@dataclass
class Run:
    cfg: ExperimentConfig

    @property
    def out(self) -> Path:
        return self.cfg.out

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": self.cfg.seed, "seeds": self.cfg.seeds()}

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    # data
    @cached_property
    def dataset(self) -> Dataset:
        d = self.path("data")
        if not (d / "manifest.json").exists():
            raise DataError(f"no dataset under {d}; run `gen-data` first")
        try:
            return load_dataset(d)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"unreadable dataset under {d}: {exc}") from exc

    @cached_property
    def phi(self) -> Vectorizer:
        return Vectorizer.from_spec(self.dataset.spec)

    @cached_property
    def train_set(self) -> Encoded:
        return Encoded.build(self.dataset.train, self.phi)

    @cached_property
    def test_set(self) -> Encoded:
        return Encoded.build(self.dataset.test, self.phi)

    @cached_property
    def finetune_split(self) -> tuple[Encoded, Encoded]:
        """(fit, validation) parts of the train set; validation is a fixed 10% per class."""
        tr = self.train_set
        rng = np.random.default_rng(sub_seed(self.cfg.seeds()["finetune"], "validation"))
        val = []
        for label in (0, 1):
            idx = np.flatnonzero(tr.y == label)
            val += rng.choice(idx, size=max(1, len(idx) // 10), replace=False).tolist() if len(idx) > 1 else []
        held = set(val)
        return tr.subset([i for i in range(len(tr)) if i not in held]), tr.subset(sorted(held))

    @cached_property
    def train_benign(self):
        return [s for s in self.dataset.train if s.label == 0]

    @cached_property
    def B(self) -> BaselineSet:
        """Masking pool for explainers (train benign)."""
        return BaselineSet(self.train_benign, self.phi, self.cfg.seeds()["mask"])

    @cached_property
    def weight_B(self) -> BaselineSet:
        return self.B.with_seed(self.cfg.seeds()["weight"])

    @cached_property
    def eval_B(self) -> BaselineSet:
        """Masking pool for every reported MPD/AMP (held-out benign, fixed evaluation seed)."""
        benign = [s for s in self.dataset.test if s.label == 0]
        return BaselineSet(benign, self.phi, self.cfg.seeds()["eval"])

    @cached_property
    def test_index(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.test_set.samples)}

    @cached_property
    def explain_idx(self) -> list[int]:
        """Test risk samples (planted ground truth), in id order, optionally capped."""
        te = self.test_set
        idx = sorted((i for i in range(len(te)) if te.y[i] == 1), key=lambda i: te.samples[i].id)
        cap = self.cfg.raw["max_explain"]
        return idx[:cap] if cap else idx

    # models
    def model(self, name: str) -> Model:
        p = self.path("models", f"{name}.json")
        if not p.exists():
            stage = "train" if name == "base" else "finetune"
            raise DataError(f"no {name} model at {p}; run `{stage}` first")
        try:
            return load_checkpoint(p.read_bytes())
        except CheckpointError as exc:
            raise DataError(f"{p}: {exc}") from exc

    def save_model(self, name: str, model: Model) -> None:
        p = self.path("models", f"{name}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(save_checkpoint(model))

    def accuracy(self, model: Model, data: Encoded) -> float:
        return float(np.mean((predict_proba(model, data.X) >= 0.5) == data.y))

    def gradient_baseline(self, i: int) -> np.ndarray:
        te = self.test_set
        I = te.indicators[i]
        return Masker(te.X[i], I, self.B).apply(range(len(I)))

    def sample_seed(self, sid: str) -> int:
        return sub_seed(self.cfg.seeds()["explain"], sid)


# --- stages ------------------------------------------------------------------------

def gen_data(run: Run) -> dict:
    ds = generate_dataset(run.cfg.task_spec())
    manifest = save_dataset(ds, run.path("data"))
    manifest_path = run.path("data", "manifest.json")
    doc = json.loads(manifest_path.read_text())
    doc.update(run.meta)
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("dataset: %d train, %d test", len(ds.train), len(ds.test))
    return manifest


def train(run: Run) -> Model:
    cfg = run.cfg
    m, n = run.phi.shape
    model = ARCHITECTURES[cfg.raw["model"]["arch"]](m, n, seed=cfg.seeds()["model"], **cfg.model_kwargs())
    rows = []

    def on_epoch(cur, epoch, stats):
        rows.append([epoch, stats["loss"], run.accuracy(cur, run.train_set), run.accuracy(cur, run.test_set)])
        log.info("train epoch %d loss %.4f", epoch, stats["loss"])
        return False

    tr = run.train_set
    model = fit(model, tr.X, tr.y, cfg.train_config(), on_epoch=on_epoch)
    run.save_model("base", model)
    write_csv(run.path("logs", "train.csv"), ["epoch", "loss", "train_acc", "test_acc"], rows, cfg)
    return model


def finetune_stage(run: Run) -> Model:
    cfg = run.cfg
    base = run.model("base")
    t0 = time.perf_counter()
    fit_set, val_set = run.finetune_split
    result = finetune(base, fit_set, cfg.finetune_config(), run.phi, val=val_set,
                      explainer_cfg=cfg.explainer_config())
    elapsed = time.perf_counter() - t0
    run.save_model("finetuned", result.model)
    hist = result.history
    cols = ["epoch", "L0", "L1", "L2", "L3", "train_acc", "val_acc", "val_amp"]
    write_csv(run.path("logs", "finetune.csv"), cols, ([r[c] for c in cols] for r in hist), cfg)
    rows = [[name, run.accuracy(m, run.train_set), run.accuracy(m, run.test_set)]
            for name, m in (("base", base), ("finetuned", result.model))]
    write_csv(run.path("eval", "table7_accuracy.csv"), ["model", "train_acc", "test_acc"], rows, cfg)
    # wall time is not reproducible, so it only goes to the log
    log.info("finetune took %.1f s over %d epochs", elapsed, len(hist))
    return result.model


# explain -----------------------------------------------------------------------------

def _attr_to_json(a: ICAttribution) -> dict:
    return {"scores": a.scores.tolist(), "forwards": int(a.forwards)}


def _attr_from_json(name: str, d: dict) -> ICAttribution:
    return ICAttribution(np.asarray(d["scores"], dtype=np.float64), name, int(d["forwards"]))


def _explain_one(args) -> dict:
    run, model_name, model, i = args
    te = run.test_set
    sid, x, I = te.samples[i].id, te.X[i], te.indicators[i]
    b_v = run.gradient_baseline(i)
    rec = {"sample_id": sid, "model": model_name, "n_ics": len(I),
           "truth": list(truth_in_indicator(te.samples[i].ground_truth, I)),
           "fx": float(predict_proba(model, x)[0]), "explainers": {}}
    for name in run.cfg.raw["explainers"]:
        a = explain_ic(name, model, x, I, run.B, b_v, run.cfg.explainer_config(), run.sample_seed(sid))
        rec["explainers"][name] = _attr_to_json(a)
    rec.update(run.meta)
    return rec


def _ensemble_one(args) -> dict:
    run, model, rec, scenario, k = args
    te = run.test_set
    i = run.test_index[rec["sample_id"]]
    given = {n: _attr_from_json(n, d) for n, d in rec["explainers"].items()}
    missing = [n for n in scenario_explainers(scenario) if n not in given]
    if missing:
        raise DataError(f"explainers {missing} not in the attribution records")
    kw = dict(cfg=run.cfg.explainer_config(), seed=run.sample_seed(rec["sample_id"]), eval_B=run.eval_B,
              attributions=given, sample_id=rec["sample_id"])
    x, I = te.X[i], te.indicators[i]
    w = explain_ensemble(x, I, model, scenario, k, run.B, weight_B=run.weight_B,
                         weight_k=run.cfg.raw["weight_k"], **kw)
    nv = naive_ensemble(x, I, model, scenario, k, run.B, **kw)
    return {"sample_id": rec["sample_id"], "scenario": scenario, "k": k, "truth": rec["truth"],
            "n_ics": rec["n_ics"], "weighted": w.to_record(), "naive": nv.to_record(), **run.meta}


def _cost_one(args) -> dict:
    """IC-level vs feature-level cost on one sample."""
    run, model, i = args
    te = run.test_set
    sid, x, I = te.samples[i].id, te.X[i], te.indicators[i]
    ecfg = run.cfg.explainer_config()
    d = int(np.any(x != 0, axis=1).sum())
    n_ic = ecfg.n_neighbors
    per_param = n_ic / (len(I) + 1)
    n_feat = neighbors_for(d, per_param)
    O = BlackBox(model)
    seed = sub_seed(run.sample_seed(sid), "cost")
    lime_explain(O, Masker(x, I, run.B), n_ic, seed, ecfg)
    ic_calls = O.calls
    O = BlackBox(model)
    lime_feature_explain(O, x, n_feat, seed, ecfg)
    feat_calls = O.calls
    shap_ic = len(I) <= ecfg.shapley_exact_cap
    try:
        shapley_feature_explain(BlackBox(model), x, ecfg.shapley_exact_cap)
        shap_feat = True
    except InfeasibleError:
        shap_feat = False
    return {"sample_id": sid, "n_ics": len(I), "n_features": d, "cells": int(x.size),
            "lime_ic_forwards": ic_calls, "lime_feature_forwards": feat_calls,
            "neighbors_per_parameter": per_param,
            "shapley_ic_exact": shap_ic, "shapley_ic_forwards": 2 ** len(I) if shap_ic else None,
            "shapley_feature_feasible": shap_feat, **run.meta}


def explain(run: Run, scenarios: Sequence[str] | None = None, k: int | None = None,
            cost_samples: int = 10) -> None:
    cfg = run.cfg
    k = k or cfg.raw["k"]
    scenarios = list(scenarios or cfg.raw["scenarios"])
    jobs = cfg.raw["jobs"]
    models = {name: run.model(name) for name in MODELS}
    for name, model in models.items():
        recs = _pmap(_explain_one, [(run, name, model, i) for i in run.explain_idx], jobs)
        write_jsonl(run.path("explain", f"attributions-{name}.jsonl"), recs)
        log.info("explained %d samples on the %s model", len(recs), name)
    recs = read_jsonl(run.path("explain", "attributions-finetuned.jsonl"))
    ft = models["finetuned"]
    for scenario in scenarios:
        out = _pmap(_ensemble_one, [(run, ft, r, scenario, k) for r in recs], jobs)
        write_jsonl(run.path("explain", f"ensemble-{scenario}.jsonl"), out)
    # cost comparison on samples whose feature count dwarfs their IC count
    te = run.test_set
    big = [i for i in run.explain_idx if np.any(te.X[i] != 0, axis=1).sum() >= 10 * len(te.indicators[i])]
    cost = _pmap(_cost_one, [(run, ft, i) for i in big[:cost_samples]], jobs)
    write_jsonl(run.path("explain", "cost.jsonl"), cost)


# eval -----------------------------------------------------------------------------------

def _items(run: Run, recs: list[dict]):
    te = run.test_set
    return [(r["sample_id"], te.X[run.test_index[r["sample_id"]]], te.indicators[run.test_index[r["sample_id"]]])
            for r in recs]


def _check_meta(run: Run, recs: list[dict], what: str) -> None:
    for r in recs:
        if r.get("config_hash") != run.cfg.hash():
            raise DataError(f"{what} was produced by a different config ({r.get('config_hash')}); rerun `explain`")


def _fidelity_table(run: Run, k: int) -> tuple[list[list], dict]:
    per_model = {}
    for name in MODELS:
        recs = read_jsonl(run.path("explain", f"attributions-{name}.jsonl"))
        _check_meta(run, recs, f"attributions-{name}.jsonl")
        per_model[name] = recs
    model = {name: run.model(name) for name in MODELS}
    rows, curves = [], {}
    for e in run.cfg.raw["explainers"]:
        vals = {}
        for name in MODELS:
            recs = per_model[name]
            attrs = {r["sample_id"]: _attr_from_json(e, r["explainers"][e]) for r in recs}
            items = _items(run, recs)
            vals[name] = global_fidelity(model[name], items, attrs, k, run.eval_B, e)
            curves[(name, e)] = (items, attrs)
        a, b = vals["base"], vals["finetuned"]
        rows.append([e, k, a.mean, b.mean, _pct(a.mean, b.mean), len(b.values), a.filtered])
    return rows, {"curves": curves, "models": model}


def _ensemble_table(run: Run, k: int) -> list[list]:
    rows = []
    for scenario in run.cfg.raw["scenarios"]:
        recs = read_jsonl(run.path("explain", f"ensemble-{scenario}.jsonl"))
        _check_meta(run, recs, f"ensemble-{scenario}.jsonl")
        kept = [r for r in recs if r["n_ics"] > k and r["weighted"]["reason"] != "normal-sample"]
        nv = [r["naive"]["mpd"] for r in kept]
        w = [r["weighted"]["mpd"] for r in kept]
        a = float(np.mean(nv)) if nv else None
        b = float(np.mean(w)) if w else None
        rows.append([scenario, k, a, b, _pct(a, b), len(kept)])
    return rows


def verify_records(run: Run) -> int:
    """Recompute the MPD stored in every ensemble record; raise on any mismatch."""
    ft = run.model("finetuned")
    checked = 0
    for scenario in run.cfg.raw["scenarios"]:
        for r in read_jsonl(run.path("explain", f"ensemble-{scenario}.jsonl")):
            i = run.test_index[r["sample_id"]]
            x, I = run.test_set.X[i], run.test_set.indicators[i]
            for kind in ("weighted", "naive"):
                rec = r[kind]
                if rec["mpd"] is None:
                    continue
                fx = float(predict_proba(ft, x)[0])
                got = mpd_k(x, np.asarray(rec["final_scores"]), ft, rec["k"], I, run.eval_B, fx=fx)
                if got != rec["mpd"]:
                    raise DataError(f"{r['sample_id']} {scenario}/{kind}: stored MPD {rec['mpd']} != {got}")
                checked += 1
    return checked


def _auc_table(run: Run) -> list[list]:
    rows = []
    recs = read_jsonl(run.path("explain", "attributions-finetuned.jsonl"))
    for e in run.cfg.raw["explainers"]:
        res = roc_auc([r["explainers"][e]["scores"] for r in recs], [r["truth"] for r in recs])
        rows.append([e, res.pooled_auc, res.mean_local, sum(v is not None for v in res.local)])
    for scenario in run.cfg.raw["scenarios"]:
        recs = [r for r in read_jsonl(run.path("explain", f"ensemble-{scenario}.jsonl"))
                if r["weighted"]["reason"] != "normal-sample"]
        if not recs:
            rows.append([f"finer:{scenario}", None, None, 0])
            continue
        res = roc_auc([r["weighted"]["final_scores"] for r in recs], [r["truth"] for r in recs])
        rows.append([f"finer:{scenario}", res.pooled_auc, res.mean_local, sum(v is not None for v in res.local)])
    return rows


def _cost_table(run: Run) -> list[list]:
    recs = read_jsonl(run.path("explain", "cost.jsonl"))
    if not recs:
        return [["lime", None, None, None, 0], ["shapley", None, None, None, 0]]
    ic = float(np.mean([r["lime_ic_forwards"] for r in recs]))
    feat = float(np.mean([r["lime_feature_forwards"] for r in recs]))
    rows = [["lime", ic, feat, 100.0 * (1 - ic / feat), len(recs)]]
    exact = [r for r in recs if r["shapley_ic_exact"]]
    sh_ic = float(np.mean([r["shapley_ic_forwards"] for r in exact])) if exact else None
    feasible = sum(r["shapley_feature_feasible"] for r in recs)
    rows.append(["shapley", sh_ic, "infeasible" if feasible == 0 else feasible, None, len(exact)])
    return rows


def _chart(path: Path, series: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str,
           run: Run) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": run.cfg.hash(), "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label in sorted(series):
            pts = series[label]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={
            "Date": None, "Creator": "finer",
            "Description": f"config_hash={run.cfg.hash()} seed={run.cfg.seed}"})
        plt.close(fig)


def evaluate(run: Run, k: int | None = None) -> dict[str, Path]:
    cfg = run.cfg
    k = k or cfg.raw["k"]
    ev = run.path("eval")
    n = verify_records(run)
    log.info("verified %d stored ensemble MPDs", n)
    out = {}
    rows4, extra = _fidelity_table(run, k)
    out["table4"] = ev / "table4_fidelity.csv"
    write_csv(out["table4"], ["explainer", "k", "mpd_without", "mpd_with", "improvement_pct", "n", "filtered"],
              rows4, cfg)
    out["table5"] = ev / "table5_ensemble.csv"
    write_csv(out["table5"], ["scenario", "k", "mpd_naive", "mpd_weighted", "improvement_pct", "n"],
              _ensemble_table(run, k), cfg)
    out["table6"] = ev / "table6_cost.csv"
    write_csv(out["table6"], ["explainer", "ic_forwards", "feature_forwards", "reduction_pct", "n"],
              _cost_table(run), cfg)
    out["table8"] = ev / "table8_auc.csv"
    write_csv(out["table8"], ["method", "pooled_auc", "mean_local_auc", "n"], _auc_table(run), cfg)

    # MPD-vs-k and AMP-vs-p curves
    curve_rows, amp_rows = [], []
    mpd_series, amp_series = {}, {}
    for (name, e), (items, attrs) in sorted(extra["curves"].items()):
        model = extra["models"][name]
        for kk in cfg.raw["k_grid"]:
            rep = global_fidelity(model, items, attrs, kk, run.eval_B, e)
            curve_rows.append([name, e, kk, rep.mean, len(rep.values), run.eval_B.seed])
            if rep.mean is not None:
                mpd_series.setdefault(f"{e} ({name})", []).append((kk, rep.mean))
    for name in MODELS:
        model = extra["models"][name]
        per = {e: attrs for (nm, e), (_, attrs) in extra["curves"].items() if nm == name}
        items = next(items for (nm, _), (items, _) in extra["curves"].items() if nm == name)
        for p in cfg.raw["p_grid"]:
            v = amp(model, items, per, p, run.eval_B)
            amp_rows.append([name, p, v, len(items), run.eval_B.seed])
            amp_series.setdefault(name, []).append((p, v))
    out["mpd_curve"] = ev / "mpd_curve.csv"
    write_csv(out["mpd_curve"], ["model", "explainer", "k", "mean_mpd", "n", "eval_seed"], curve_rows, cfg)
    out["amp_curve"] = ev / "amp_curve.csv"
    write_csv(out["amp_curve"], ["model", "p", "amp", "n", "eval_seed"], amp_rows, cfg)
    _chart(ev / "mpd_curve.svg", mpd_series, "masked ICs (k)", "mean MPD", run)
    _chart(ev / "amp_curve.svg", amp_series, "masked ICs (%)", "AMP", run)
    return out


def ablate(run: Run) -> Path:
    """Side-by-side with/without pairings for each component."""
    ev = run.path("eval")
    rows = []
    for r in read_csv(ev / "table4_fidelity.csv"):
        rows.append(["finetune", r["explainer"], "mpd@" + r["k"], r["mpd_without"], r["mpd_with"], r["improvement_pct"]])
    for r in read_csv(ev / "table5_ensemble.csv"):
        rows.append(["mpd-weighting", r["scenario"], "mpd@" + r["k"], r["mpd_naive"], r["mpd_weighted"],
                     r["improvement_pct"]])
    for r in read_csv(ev / "table6_cost.csv"):
        if r["explainer"] == "lime":
            rows.append(["ic-adjustment", "lime", "forwards", r["feature_forwards"], r["ic_forwards"],
                         r["reduction_pct"] and repr(-float(r["reduction_pct"]))])
    acc = {r["model"]: r["test_acc"] for r in read_csv(ev / "table7_accuracy.csv")}
    rows.append(["finetune", "model", "test_acc", acc.get("base"), acc.get("finetuned"),
                 _pct(float(acc["base"]), float(acc["finetuned"])) if len(acc) == 2 else None])
    path = run.path("ablate", "ablation.csv")
    write_csv(path, ["component", "unit", "metric", "without", "with", "change_pct"], rows, run.cfg)
    return path


def _md_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)\n"
    cols = [c for c in rows[0] if c not in ("config_hash", "seed")]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            try:
                cells.append(f"{float(v):.4f}" if "." in v or "e" in v else v)
            except (TypeError, ValueError):
                cells.append(v)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report(run: Run) -> Path:
    ev = run.path("eval")
    parts = [
        "# FINER benchmark report\n",
        f"config hash `{run.cfg.hash()}`, master seed {run.cfg.seed}\n",
        "sub-seeds: " + ", ".join(f"{k}={v}" for k, v in run.cfg.seeds().items()) + "\n",
    ]
    sections = [
        ("Fidelity before and after fine-tuning (MPD@k)", "table4_fidelity.csv"),
        ("MPD-weighted vs naive ensemble", "table5_ensemble.csv"),
        ("IC-level vs feature-level cost", "table6_cost.csv"),
        ("Accuracy", "table7_accuracy.csv"),
        ("Ground-truth localization (AUC)", "table8_auc.csv"),
    ]
    for title, name in sections:
        parts.append(f"\n## {title}\n\n" + _md_table(read_csv(ev / name)))
    abl = run.path("ablate", "ablation.csv")
    if abl.exists():
        parts.append("\n## Ablation\n\n" + _md_table(read_csv(abl)))
    parts.append("\nCurves: `eval/mpd_curve.csv` (`mpd_curve.svg`), `eval/amp_curve.csv` (`amp_curve.svg`).\n")
    path = run.path("report.md")
    path.write_text("".join(parts))
    return path


STAGES = ("gen-data", "train", "finetune", "explain", "eval", "ablate", "report")


def run_all(run: Run) -> None:
    gen_data(run)
    train(run)
    finetune_stage(run)
    explain(run)
    evaluate(run)
    ablate(run)
    report(run)
