"""CLI stages over an output directory.

Layout under ``out``::

    data/       train.mmbd test.mmbd poisoned.mmbd attack.json
    models/     model.mmbd mitigated.mmbd adaptive.mmbd
    reports/    *.json (machine-readable) and *.txt (aligned tables)
    manifests/  <stage>.json plus <stage>.timing.json

A stage collects its artifacts in memory and writes them only after it
finished, each file via temp + rename, and the manifest last. Manifests hold
no wall-clock data so repeated runs are byte-identical; timings go to the
sidecar named in the manifest.
"""

from __future__ import annotations

import csv
import io
import json
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..attacks import Dataset
from ..detector import DetectionReport
from ..engine import BoundSet, dumps_model, loads_model
from ..mitigator import InfeasibleMitigationError, activation_profile, bounded_forward, mitigate
from ..training import evaluate, history_rows
from .config import ExperimentConfig, config_echo
from .core import AttackInfo, evaluate_attack, fit, make_attack, make_data, run_adaptive, run_detection
from .ensemble import EnsembleResult, ensemble_roc, run_ensemble, threshold_sweep
from .io import atomic_write_bytes, atomic_write_text, dump_json, dumps_dataset, load_dataset

STAGES = ("gen-data", "attack", "train", "detect", "mitigate", "adaptive", "roc", "report")
SWEEP_THETAS = (0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0)


class StageInputError(RuntimeError):
    """A stage's inputs are missing; run the earlier stage first."""


class InconclusiveDetection(RuntimeError):
    pass


class Stage:
    def __init__(self, name: str, cfg: ExperimentConfig, out: Path):
        self.name, self.cfg, self.out = name, cfg, Path(out)
        self.files: dict[str, bytes] = {}
        self.status = "ok"
        self.t0 = time.perf_counter()

    def add(self, rel: str, blob: bytes | str):
        self.files[rel] = blob.encode() if isinstance(blob, str) else blob

    def add_json(self, rel: str, obj):
        self.add(rel, dump_json(obj))

    def need(self, rel: str) -> Path:
        p = self.out / rel
        if not p.exists():
            raise StageInputError(f"{rel} not found under {self.out}; run the earlier stage first")
        return p

    def commit(self) -> dict:
        import hashlib

        for rel, blob in sorted(self.files.items()):
            atomic_write_bytes(self.out / rel, blob)
        timing_rel = f"manifests/{self.name}.timing.json"
        manifest = {
            "stage": self.name,
            "status": self.status,
            "tool": "mmbd",
            "tool_version": __version__,
            "seed": self.cfg.seed,
            "config": config_echo(self.cfg),
            "artifacts": [{"path": rel, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
                          for rel, blob in sorted(self.files.items())],
            "timing_sidecar": timing_rel,
        }
        atomic_write_text(self.out / timing_rel,
                          dump_json({"stage": self.name, "wall_clock_s": time.perf_counter() - self.t0}))
        atomic_write_text(self.out / f"manifests/{self.name}.json", dump_json(manifest))
        return manifest


def _rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _load_model(path: Path):
    return loads_model(path.read_bytes())


def _load_info(st: Stage) -> AttackInfo:
    return AttackInfo.from_dict(json.loads(st.need("data/attack.json").read_text()))


# ---------------------------------------------------------------- stages


def gen_data(cfg, out, **_):
    st = Stage("gen-data", cfg, out)
    train_ds, test_ds = make_data(cfg, cfg.seed)
    st.add("data/train.mmbd", dumps_dataset(train_ds))
    st.add("data/test.mmbd", dumps_dataset(test_ds))
    return st.commit(), {"train": len(train_ds), "test": len(test_ds)}


def attack(cfg, out, **_):
    st = Stage("attack", cfg, out)
    train_ds = load_dataset(st.need("data/train.mmbd"))
    poisoned, info = make_attack(cfg, train_ds, cfg.seed)
    st.add("data/poisoned.mmbd", dumps_dataset(poisoned))
    st.add_json("data/attack.json", info.to_dict())
    return st.commit(), {"poisoned": len(poisoned) - len(train_ds), "targets": info.targets}


def train_stage(cfg, out, **_):
    st = Stage("train", cfg, out)
    poisoned = load_dataset(st.need("data/poisoned.mmbd"))
    test_ds = load_dataset(st.need("data/test.mmbd"))
    info = _load_info(st)
    model, history = fit(cfg, poisoned, cfg.seed)
    ev = evaluate_attack(model, test_ds, info)
    st.add("models/model.mmbd", dumps_model(model))
    st.add("reports/train_history.csv", history_rows(history))
    st.add_json("reports/eval.json", ev.to_dict())
    return st.commit(), ev.to_dict()


def detect_stage(cfg, out, theta=None, jobs=1, model="model", **_):
    st = Stage("detect", cfg, out)
    m = _load_model(st.need(f"models/{model}.mmbd"))
    rep = run_detection(cfg, m, cfg.seed, theta, jobs)
    st.add_json("reports/detection.json", rep.to_dict())
    st.add("reports/detection.txt", rep.table())
    if rep.verdict == "inconclusive":
        st.status = "inconclusive"
    manifest = st.commit()
    if rep.verdict == "inconclusive":
        raise InconclusiveDetection(rep.reason)
    return manifest, {"verdict": rep.verdict, "pvalue": rep.pvalue, "inferred_target": rep.inferred_target}


def mitigate_stage(cfg, out, **_):
    from .core import mitigation_config

    st = Stage("mitigate", cfg, out)
    m = _load_model(st.need("models/model.mmbd"))
    train_ds = load_dataset(st.need("data/train.mmbd"))
    test_ds = load_dataset(st.need("data/test.mmbd"))
    info = _load_info(st)
    before = [p.copy() for p in m.params]
    try:
        res = mitigate(m, train_ds, mitigation_config(cfg, cfg.seed))
    except InfeasibleMitigationError as exc:
        st.status = "infeasible"
        st.add("reports/mitigation_log.csv", _rows_csv(exc.log))
        st.commit()
        raise
    mitigated = m.with_bounds(res.bounds)
    ev0 = evaluate_attack(m.with_bounds(None), test_ds, info)
    ev1 = evaluate_attack(mitigated, test_ds, info)
    unchanged = all(np.array_equal(a, b) for a, b in zip(before, m.params))
    inf_identity = bool(np.array_equal(
        bounded_forward(m, test_ds.x, BoundSet.constant(m, np.inf, res.bounds.bounds)),
        m.forward(test_ds.x, bounds=BoundSet())))
    xs = test_ds.x
    if info.trigger is not None:
        xs = info.trigger.apply(test_ds.x[np.isin(test_ds.y, list(info.sources))])
    prof_clean = activation_profile(m, test_ds.x, res.bounds)
    prof_trig = activation_profile(m, xs, res.bounds)
    summary = {"before": ev0.to_dict(), "after": ev1.to_dict(), "params_unchanged": unchanged,
               "infinite_bounds_identity": inf_identity, "dropped_clean": res.dropped,
               "first_feasible_iter": res.first_feasible, "bound_norm": res.bounds.norm()}
    st.add("models/mitigated.mmbd", dumps_model(mitigated))
    st.add_json("reports/mitigation.json", summary)
    st.add("reports/mitigation_log.csv", _rows_csv(res.log))
    rows = [dict(r, source="clean") for r in prof_clean.rows()] + [dict(r, source="triggered") for r in prof_trig.rows()]
    st.add("reports/activation_profile.csv", _rows_csv(rows))
    return st.commit(), summary


def adaptive_stage(cfg, out, **_):
    st = Stage("adaptive", cfg, out)
    m = _load_model(st.need("models/model.mmbd"))
    poisoned = load_dataset(st.need("data/poisoned.mmbd"))
    test_ds = load_dataset(st.need("data/test.mmbd"))
    info = _load_info(st)
    if info.target is None:
        raise StageInputError("adaptive fine-tuning needs a single-target attack")
    tuned, alog = run_adaptive(cfg, m, poisoned, test_ds, info, cfg.seed)
    rep = run_detection(cfg, tuned, cfg.seed)
    summary = {"epochs": alog.epochs, "inner_calls": alog.inner_calls,
               "target_statistic": rep.stats[info.target], "pvalue": rep.pvalue,
               "verdict": rep.verdict, "eval": evaluate_attack(tuned, test_ds, info).to_dict()}
    st.add("models/adaptive.mmbd", dumps_model(tuned))
    st.add_json("reports/adaptive.json", summary)
    return st.commit(), {k: summary[k] for k in ("target_statistic", "pvalue", "verdict")}


def roc_stage(cfg, out, jobs=1, **_):
    """Ensemble of the configured scenario plus a matching clean ensemble;
    pooled ROC with partial AUC and a threshold sweep over stored p-values."""
    st = Stage("roc", cfg, out)
    attacked = run_ensemble(cfg, jobs=jobs)
    if cfg.attacked:
        clean_cfg = cfg.model_copy(update={"scenario": "clean"})
        clean = run_ensemble(clean_cfg, jobs=jobs)
    else:
        clean = EnsembleResult("clean", [], {})
    doc = {"ensemble": attacked.to_dict(), "clean_ensemble": clean.to_dict()}
    text = [_ensemble_table(attacked), _ensemble_table(clean)]
    if cfg.attacked:
        roc = ensemble_roc(attacked, clean)
        sweep = threshold_sweep(attacked.rows, clean.rows, SWEEP_THETAS)
        doc.update(roc=roc.to_dict(), threshold_sweep=sweep)
        text.append(f"partial AUC (FPR <= {roc.max_fpr:g}): {roc.pauc:.6f}\n")
        text.append(_sweep_table(sweep))
    st.add_json("reports/roc.json", doc)
    st.add("reports/roc.txt", "\n".join(text))
    return st.commit(), {"summary": attacked.summary, "pauc": doc.get("roc", {}).get("pauc")}


def report_stage(cfg, out, **_):
    st = Stage("report", cfg, out)
    pieces = {}
    for name in ("eval", "detection", "mitigation", "adaptive", "roc"):
        p = Path(out) / f"reports/{name}.json"
        if p.exists():
            pieces[name] = json.loads(p.read_text())
    if not pieces:
        raise StageInputError("no stage reports found; run some stages first")
    lines = [f"scenario {cfg.scenario}  domain {cfg.domain}  seed {cfg.seed}", ""]
    if "eval" in pieces:
        e = pieces["eval"]
        asr = "n/a" if e["asr"] is None else f"{e['asr']:.4f}"
        lines.append(f"clean accuracy      {e['acc']:.4f}")
        lines.append(f"attack success      {asr}")
    if "detection" in pieces:
        lines += ["", DetectionReport.from_dict(pieces["detection"]).table().rstrip()]
    if "mitigation" in pieces:
        mt = pieces["mitigation"]
        for when in ("before", "after"):
            asr = mt[when]["asr"]
            lines.append(f"mitigation {when:<6}   acc {mt[when]['acc']:.4f}  asr "
                         + ("n/a" if asr is None else f"{asr:.4f}"))
    if "adaptive" in pieces:
        a = pieces["adaptive"]
        lines.append(f"adaptive            target MM {a['target_statistic']:.4f}  pv {a['pvalue']}")
    if "roc" in pieces and "roc" in pieces["roc"]:
        lines.append(f"partial AUC         {pieces['roc']['roc']['pauc']:.6f}")
    st.add_json("reports/summary.json", pieces)
    st.add("reports/summary.txt", "\n".join(lines) + "\n")
    return st.commit(), {"reports": sorted(pieces)}


def _ensemble_table(ens: EnsembleResult) -> str:
    if not ens.rows:
        return ""
    lines = [f"ensemble: {ens.scenario}",
             f"{'member':>6} {'acc':>7} {'asr':>7} {'pvalue':>10} {'verdict':>12} {'target':>6}"]
    for r in ens.rows:
        if r.get("error") and r.get("pvalue") is None:
            lines.append(f"{r['member']:>6} failed: {r['error']}")
            continue
        asr = "-" if r.get("asr") is None else f"{r['asr']:.3f}"
        pv = "-" if r.get("pvalue") is None else f"{r['pvalue']:.4g}"
        tgt = "-" if r.get("inferred_target") is None else str(r["inferred_target"])
        lines.append(f"{r['member']:>6} {r['acc']:>7.3f} {asr:>7} {pv:>10} {r['verdict']:>12} {tgt:>6}")
    for k, v in ens.summary.items():
        lines.append(f"  {k:<18} {v}")
    return "\n".join(lines) + "\n"


def _sweep_table(sweep: list[dict]) -> str:
    lines = [f"{'theta':>8} {'TPR':>6} {'FPR':>6}"]
    for s in sweep:
        lines.append(f"{s['theta']:>8g} {s['tpr']:>6.2f} {s['fpr']:>6.2f}")
    return "\n".join(lines) + "\n"


RUNNERS = {
    "gen-data": gen_data,
    "attack": attack,
    "train": train_stage,
    "detect": detect_stage,
    "mitigate": mitigate_stage,
    "adaptive": adaptive_stage,
    "roc": roc_stage,
    "report": report_stage,
}


def run_stage(name: str, cfg: ExperimentConfig, out, **kw):
    return RUNNERS[name](cfg, Path(out), **kw)
