"""Maximum-margin backdoor detection.

Per class, the largest achievable margin g_c(x) - max_{k != c} g_k(x) over
the input box is estimated by multi-restart projected gradient ascent. The
largest statistic is then scored against a Gamma null fitted to the others
with the order-statistic p-value ``1 - H0(r_max) ** (K - 1)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .engine import Classifier, margin_and_grad

log = logging.getLogger(__name__)


class NullFitError(ValueError):
    pass


class DegenerateNullError(NullFitError):
    pass


class UnsupportedDomainError(NullFitError):
    pass


@dataclass
class MarginSearchConfig:
    restarts: int = 30
    step: float | None = None  # defaults to 0.02 * (hi - lo)
    tol: float = 1e-5
    max_iter: int = 2000
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0
    check_projection: bool = False

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not self.lo < self.hi:
            raise ValueError("input box needs lo < hi")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @property
    def step_size(self) -> float:
        return 0.02 * (self.hi - self.lo) if self.step is None else float(self.step)


@dataclass
class MarginResult:
    value: float
    x: np.ndarray
    restart_values: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def best_restart(self) -> int:
        return int(np.argmax(self.restart_values))


def maximize_margin(model: Classifier, cls: int, cfg: MarginSearchConfig) -> MarginResult:
    """Multi-restart projected gradient ascent on the class-``cls`` margin.

    All restarts advance together as one batch; each stops on its own once
    the relative objective change drops below ``cfg.tol`` or the projected
    gradient vanishes. Every restart reports the best objective it visited.
    Steps have fixed length: the gradient is normalized after zeroing the
    components that push against an active box face.
    """
    if not 0 <= cls < model.num_classes:
        raise ValueError(f"class {cls} out of range")
    rng = np.random.default_rng(cfg.seed)
    R = cfg.restarts
    lo, hi, step = cfg.lo, cfg.hi, cfg.step_size
    x = rng.uniform(lo, hi, size=(R,) + model.input_shape)
    best_f = np.full(R, -np.inf)
    best_x = x.copy()
    prev_f = np.full(R, np.nan)
    active = np.ones(R, dtype=bool)
    converged = np.zeros(R, dtype=bool)
    iters = np.zeros(R, dtype=np.int64)
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.max_iter + 1):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        xa = x[ids]
        f, g = margin_and_grad(model, xa, cls)
        better = f > best_f[ids]
        best_f[ids[better]] = f[better]
        best_x[ids[better]] = xa[better]
        rel = np.abs(f - prev_f[ids]) / np.maximum(np.abs(prev_f[ids]), 1e-12)
        done = rel < cfg.tol
        g = np.where(((xa <= lo) & (g < 0)) | ((xa >= hi) & (g > 0)), 0.0, g)
        norm = np.sqrt((g * g).sum(axis=axes))
        done |= norm == 0.0
        capped = iters[ids] >= cfg.max_iter
        converged[ids[done]] = True
        active[ids[done | capped]] = False
        prev_f[ids] = f
        move = ~(done | capped)
        if not move.any():
            continue
        mids = ids[move]
        shape = (-1,) + (1,) * (x.ndim - 1)
        x[mids] = np.clip(xa[move] + step * g[move] / norm[move].reshape(shape), lo, hi)
        iters[mids] += 1
        if cfg.check_projection:
            assert np.all((x >= lo) & (x <= hi))
    b = int(np.argmax(best_f))
    if not converged.all():
        log.debug("class %d: %d/%d restarts hit the iteration cap", cls, (~converged).sum(), R)
    return MarginResult(float(best_f[b]), best_x[b].copy(), best_f, iters, converged)


def class_seed(seed: int, cls: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(cls)]).generate_state(1)[0])


def _class_cfg(cfg: MarginSearchConfig, cls: int) -> MarginSearchConfig:
    d = asdict(cfg)
    d["seed"] = class_seed(cfg.seed, cls)
    return MarginSearchConfig(**d)


def mm_statistics(model: Classifier, cfg: MarginSearchConfig, jobs: int = 1,
                  return_results: bool = False):
    """Maximum-margin statistic for every class, in class order."""
    classes = range(model.num_classes)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda c: maximize_margin(model, c, _class_cfg(cfg, c)), classes))
    else:
        results = [maximize_margin(model, c, _class_cfg(cfg, c)) for c in classes]
    stats = np.array([r.value for r in results])
    return (stats, results) if return_results else stats


# ---------------------------------------------------------------- null model


def fit_gamma_null(stats) -> tuple[float, float]:
    """Maximum-likelihood Gamma fit; returns (shape, scale)."""
    x = np.asarray(stats, dtype=np.float64).ravel()
    if x.size < 2:
        raise UnsupportedDomainError("Gamma null needs at least two statistics")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DegenerateNullError("Gamma null needs strictly positive, finite statistics")
    mean = x.mean()
    var = x.var()
    if var <= 1e-14 * mean * mean:
        raise DegenerateNullError("null statistics have zero variance")
    s = np.log(mean) - np.mean(np.log(x))
    if s <= 0:
        raise DegenerateNullError("null statistics have zero variance")
    k = mean * mean / var
    for _ in range(100):
        f = np.log(k) - special.digamma(k) - s
        fp = 1.0 / k - special.polygamma(1, k)
        k_new = k - f / fp
        if k_new <= 0:
            k_new = k / 2.0
        if abs(k_new - k) <= 1e-13 * k:
            k = k_new
            break
        k = k_new
    return float(k), float(mean / k)


def gamma_cdf(r: float, shape: float, scale: float) -> float:
    return float(special.gammainc(shape, max(r, 0.0) / scale))


def order_statistic_pvalue(r_max: float, shape: float, scale: float, num_classes: int) -> float:
    """``1 - H0(r_max) ** (K - 1)`` computed through the upper tail."""
    upper = special.gammaincc(shape, max(r_max, 0.0) / scale)
    pv = -np.expm1((num_classes - 1) * np.log1p(-upper)) if upper < 1.0 else 1.0
    return float(min(max(pv, 0.0), 1.0))


# ---------------------------------------------------------------- detection


@dataclass
class DetectionReport:
    stats: list[float]
    r_max: float
    max_class: int
    tie: bool
    shape: float | None
    scale: float | None
    pvalue: float | None
    theta: float
    verdict: str
    inferred_target: int | None
    reason: str = ""
    traces: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.stats)

    def recompute_pvalue(self) -> float:
        return order_statistic_pvalue(self.r_max, self.shape, self.scale, self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DetectionReport:
        return cls(**d)

    def table(self) -> str:
        lines = [f"{'class':>5}  {'MM statistic':>14}"]
        for c, r in enumerate(self.stats):
            mark = "  <- max" if c == self.max_class else ""
            lines.append(f"{c:>5}  {r:>14.6f}{mark}")
        lines.append("")
        if self.shape is not None:
            lines.append(f"null Gamma     shape={self.shape:.6g} scale={self.scale:.6g}")
        pv = "n/a" if self.pvalue is None else f"{self.pvalue:.6g}"
        lines.append(f"p-value        {pv}  (theta={self.theta:g})")
        verdict = self.verdict
        if self.inferred_target is not None:
            verdict += f", inferred target class {self.inferred_target}"
        if self.reason:
            verdict += f" ({self.reason})"
        lines.append(f"verdict        {verdict}")
        return "\n".join(lines) + "\n"


def verdict_from_stats(stats, theta: float = 0.05) -> DetectionReport:
    """Null fit, p-value and verdict for precomputed statistics."""
    stats = np.asarray(stats, dtype=np.float64)
    K = stats.size
    if K < 3:
        raise UnsupportedDomainError(
            f"Gamma-null detection needs K >= 3 classes (got {K}); use mm_roc with a calibrated threshold")
    c = int(np.argmax(stats))
    r_max = float(stats[c])
    tie = int(np.sum(stats == r_max)) > 1
    rest = np.delete(stats, c)
    try:
        shape, scale = fit_gamma_null(rest)
    except DegenerateNullError as exc:
        return DetectionReport(stats.tolist(), r_max, c, tie, None, None, None, theta,
                               "inconclusive", None, reason=str(exc))
    pv = order_statistic_pvalue(r_max, shape, scale, K)
    attacked = pv < theta
    return DetectionReport(stats.tolist(), r_max, c, tie, shape, scale, pv, theta,
                           "attacked" if attacked else "clean", c if attacked else None,
                           reason="tie at maximum, lowest class index kept" if tie else "")


def detect(model: Classifier, cfg: MarginSearchConfig, theta: float = 0.05,
           jobs: int = 1) -> DetectionReport:
    if model.num_classes < 3:
        raise UnsupportedDomainError(
            "Gamma-null detection needs K >= 3 classes; use mm_roc with a calibrated threshold")
    stats, results = mm_statistics(model, cfg, jobs=jobs, return_results=True)
    report = verdict_from_stats(stats, theta)
    report.traces = [{"class": c, "restart_values": r.restart_values.tolist(),
                      "iterations": r.iterations.tolist(),
                      "converged": r.converged.tolist()} for c, r in enumerate(results)]
    report.config = asdict(cfg)
    return report


# ---------------------------------------------------------------- ROC


@dataclass
class RocResult:
    fpr: list[float]
    tpr: list[float]
    thresholds: list[float | None]
    pauc: float
    max_fpr: float

    def to_dict(self):
        return asdict(self)


def roc_from_scores(pos, neg, max_fpr: float = 0.25) -> RocResult:
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs both target and non-target statistics")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    fpr, tpr = [0.0], [0.0]
    for t in thresholds:
        fpr.append(float(np.mean(neg >= t)))
        tpr.append(float(np.mean(pos >= t)))
    f, t = np.array(fpr), np.array(tpr)
    # Trapezoids up to max_fpr, interpolating the last partial segment.
    area = 0.0
    for i in range(1, len(f)):
        x0, x1 = f[i - 1], f[i]
        if x0 >= max_fpr:
            break
        y0, y1 = t[i - 1], t[i]
        if x1 > max_fpr:
            y1 = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)
            x1 = max_fpr
        area += 0.5 * (x1 - x0) * (y0 + y1)
    if f[-1] < max_fpr:
        area += (max_fpr - f[-1]) * t[-1]
    return RocResult(fpr, tpr, [None] + thresholds.tolist(), float(area), max_fpr)


def mm_roc(ensemble, cfg: MarginSearchConfig | None = None, max_fpr: float = 0.25) -> RocResult:
    """Pooled ROC of target vs non-target MM statistics.

    ``ensemble`` holds ``(model_or_stats, target_classes)`` pairs; a model is
    scored with :func:`mm_statistics` under ``cfg``.
    """
    if not ensemble:
        raise ValueError("empty ensemble")
    pos, neg = [], []
    for member, targets in ensemble:
        stats = mm_statistics(member, cfg) if isinstance(member, Classifier) else np.asarray(member)
        for c, r in enumerate(stats):
            (pos if c in set(targets) else neg).append(float(r))
    return roc_from_scores(pos, neg, max_fpr)
