"""Independent ensemble members, aggregated with an ordered reduce."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..detector import NullFitError, RocResult, roc_from_scores
from .config import ExperimentConfig, member_seed
from .core import evaluate_attack, fit, make_attack, make_data, run_adaptive, run_detection

log = logging.getLogger(__name__)


def run_member(cfg: ExperimentConfig, seed: int, timings: dict | None = None) -> dict:
    """Data, attack, training, evaluation and detection for one member seed.
    Failures are caught and recorded in the row. Wall-clock seconds for
    training and detection go to ``timings`` (kept out of the row so rows
    stay reproducible)."""
    row = {"seed": seed, "error": None}
    timings = {} if timings is None else timings
    try:
        train_ds, test_ds = make_data(cfg, seed)
        poisoned, info = make_attack(cfg, train_ds, seed)
        t0 = time.perf_counter()
        model, _ = fit(cfg, poisoned, seed)
        if cfg.scenario == "adaptive":
            model, _ = run_adaptive(cfg, model, poisoned, test_ds, info, seed)
        timings["train_s"] = time.perf_counter() - t0
        ev = evaluate_attack(model, test_ds, info)
        row.update(targets=info.targets, acc=ev.acc, asr=ev.asr)
        try:
            t0 = time.perf_counter()
            rep = run_detection(cfg, model, seed)
            timings["detect_s"] = time.perf_counter() - t0
            row.update(stats=rep.stats, pvalue=rep.pvalue, verdict=rep.verdict,
                       inferred_target=rep.inferred_target, max_class=rep.max_class)
        except NullFitError as exc:
            row.update(stats=None, pvalue=None, verdict="unsupported", inferred_target=None,
                       max_class=None, error=str(exc))
    except Exception as exc:  # noqa: BLE001 - a member failure must not sink the ensemble
        log.warning("member seed %d failed: %s", seed, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _member_job(args):
    cfg_dict, seed = args
    return run_member(ExperimentConfig(**cfg_dict), seed)


@dataclass
class EnsembleResult:
    scenario: str
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(scenario: str, rows: list[dict]) -> dict:
    ok = [r for r in rows if r.get("verdict") in ("attacked", "clean", "inconclusive")]
    flagged = [r for r in ok if r["verdict"] == "attacked"]
    summary = {
        "n_models": len(rows),
        "n_failed": len(rows) - len(ok),
        "partial": len(ok) < len(rows),
        "flag_rate": len(flagged) / len(ok) if ok else None,
        "mean_pvalue": _mean(r["pvalue"] for r in ok),
        "mean_acc": _mean(r.get("acc") for r in ok),
        "mean_asr": _mean(r.get("asr") for r in ok),
    }
    if scenario in ("clean", "imbalance"):
        summary["false_positive_rate"] = summary["flag_rate"]
    else:
        hit = [r for r in flagged if r["inferred_target"] in r["targets"]]
        summary["detection_rate"] = summary["flag_rate"]
        summary["target_hit_rate"] = len(hit) / len(ok) if ok else None
    return summary


def run_ensemble(cfg: ExperimentConfig, n_models: int | None = None, seeds=None,
                 jobs: int = 1) -> EnsembleResult:
    """Train, attack and detect ``n_models`` members. Member ``i`` uses
    ``seeds[i]`` or, by default, the ``member`` sub-stream of the root seed."""
    n = cfg.n_models if n_models is None else n_models
    if n < 1:
        raise ValueError("n_models must be >= 1")
    seeds = [member_seed(cfg.seed, i) for i in range(n)] if seeds is None else list(seeds)[:n]
    jobs = max(1, min(jobs, len(seeds)))
    if jobs == 1:
        rows = [run_member(cfg, s) for s in seeds]
    else:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        payload = [(cfg.model_dump(), s) for s in seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_member_job, payload))  # map keeps submission order
    for i, r in enumerate(rows):
        r["member"] = i
    return EnsembleResult(cfg.scenario, rows, aggregate(cfg.scenario, rows))


def threshold_sweep(attacked_rows: list[dict], clean_rows: list[dict], thetas) -> list[dict]:
    """(theta, TPR, FPR) from stored p-values, without re-running detection.
    A member is flagged at ``theta`` iff its p-value is below ``theta``;
    members without a p-value are never flagged."""
    def rate(rows, theta):
        pvs = [r.get("pvalue") for r in rows if "pvalue" in r]
        if not pvs:
            return None
        return float(np.mean([pv is not None and (pv < theta or theta >= 1.0) for pv in pvs]))

    return [{"theta": float(t), "tpr": rate(attacked_rows, t), "fpr": rate(clean_rows, t)}
            for t in sorted(thetas)]


def ensemble_roc(attacked: EnsembleResult, clean: EnsembleResult, max_fpr: float = 0.25) -> RocResult:
    """Pooled ROC: MM statistics of true target classes are positives, every
    other class (attacked members' non-targets and all clean classes) negative."""
    pos, neg = [], []
    for r in attacked.rows + clean.rows:
        if not r.get("stats"):
            continue
        targets = set(r.get("targets") or [])
        for c, v in enumerate(r["stats"]):
            (pos if c in targets else neg).append(v)
    return roc_from_scores(pos, neg, max_fpr)
