"""Activation-bounding mitigation.

Each bounded activation becomes ``min(sigma_l(.), z_l)``. The bounds are
fitted on a handful of clean samples by gradient descent on a Lagrangian:
mean squared deviation of bounded from unbounded logits plus ``lam`` times
the summed L2 norms of the bound vectors. ``lam`` grows by ``alpha`` while
the accuracy constraint holds and shrinks by ``alpha`` otherwise. Trained
weights are never touched.

The feasible iterate with the smallest bound norm is what gets returned.
Bounds are projected onto z >= 0 after every step: the bounded activations
are ReLU outputs, and a negative bound would turn the clamp into a shift.
Descent uses momentum, and the velocity is cleared whenever the constraint
breaks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import BoundSet, Classifier, InvalidInputError

log = logging.getLogger(__name__)


class InfeasibleMitigationError(RuntimeError):
    def __init__(self, message, log_rows):
        super().__init__(message)
        self.log = log_rows


@dataclass
class MitigationConfig:
    per_class: int = 20
    accuracy: float = 0.95
    step: float = 0.05
    momentum: float = 0.9
    lam: float = 0.1
    alpha: float = 1.5
    max_iter: int = 300
    init: float = 100.0
    min_ratio: float = 0.5
    init_scale: float | None = None
    layers: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.accuracy <= 1.0:
            raise ValueError("accuracy benchmark must lie in (0, 1]")
        if not self.alpha > 1.0:
            raise ValueError("alpha must exceed 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 <= self.min_ratio < 1.0:
            raise ValueError("min_ratio must lie in [0, 1)")


@dataclass
class MitigationResult:
    bounds: BoundSet
    log: list[dict] = field(default_factory=list)
    dropped: int = 0
    first_feasible: int | None = None


def bounded_forward(model: Classifier, x, bounds: BoundSet) -> np.ndarray:
    model.check_bounds(bounds)
    x = np.asarray(x, dtype=np.float64)
    out = model.forward(x, bounds=bounds)
    return out[0] if x.shape == model.input_shape else out


def select_clean_set(model: Classifier, ds, per_class: int, seed) -> tuple[np.ndarray, np.ndarray, int]:
    """Pick up to ``per_class`` samples per class, keeping only the ones the
    unbounded model already classifies correctly."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(model.num_classes):
        pool = np.flatnonzero(ds.y == c)
        picks.append(rng.choice(pool, size=min(per_class, len(pool)), replace=False))
    idx = np.sort(np.concatenate(picks))
    x, y = ds.x[idx], ds.y[idx]
    ok = model.forward(x, bounds=BoundSet()).argmax(axis=1) == y
    dropped = int((~ok).sum())
    if dropped:
        log.warning("dropping %d misclassified samples from the clean set", dropped)
    return x[ok], y[ok], dropped


def mitigation_loss(model: Classifier, x, ref_logits, bounds: BoundSet, lam: float):
    """Lagrangian value and its gradient with respect to each bound vector."""
    logits, caches = model.forward(x, bounds=bounds, keep_cache=True)
    diff = logits - ref_logits
    n, k = diff.shape
    fit = float((diff**2).sum() / (n * k))
    _, _, bgrads = model.backward(caches, 2.0 * diff / (n * k), want_params=False, want_bounds=True)
    penalty = 0.0
    for i, z in bounds.bounds.items():
        nz = np.linalg.norm(z)
        penalty += nz
        if nz > 0:
            bgrads[i] = bgrads[i] + lam * z / nz
    return fit + lam * penalty, bgrads


def mitigate(model: Classifier, ds, cfg: MitigationConfig) -> MitigationResult:
    """Fit activation bounds on a small clean set drawn from ``ds``."""
    layers = model.bounded_layer_indices() if cfg.layers is None else list(cfg.layers)
    if not layers:
        raise InvalidInputError("model has no layers to bound")
    x, y, dropped = select_clean_set(model, ds, cfg.per_class, cfg.seed)
    if len(x) == 0:
        raise InvalidInputError("no correctly classified clean samples")
    ref = model.forward(x, bounds=BoundSet())
    Z = BoundSet.constant(model, cfg.init, layers)
    if cfg.init_scale is not None:
        peak = _layer_maxima(model, x, None, layers)
        for i in layers:
            Z.bounds[i][...] = cfg.init_scale * max(float(peak[i].max()), 1e-12)
    velocity = {i: np.zeros_like(z) for i, z in Z.bounds.items()}
    lam = cfg.lam
    best, best_norm, first = None, np.inf, None
    rows = []
    for it in range(cfg.max_iter):
        loss, grads = mitigation_loss(model, x, ref, Z, lam)
        for i, z in Z.bounds.items():
            velocity[i] = cfg.momentum * velocity[i] - cfg.step * grads[i]
            # no bound may lose more than a fixed fraction per step; this also
            # keeps z > 0 (a negative bound on a ReLU output would only shift it)
            floor = cfg.min_ratio * z
            z += velocity[i]
            low = z < floor
            z[low] = floor[low]
            velocity[i][low] = 0.0
        acc = float(np.mean(model.forward(x, bounds=Z).argmax(axis=1) == y))
        feasible = acc >= cfg.accuracy
        norm = Z.norm()
        if feasible:
            lam *= cfg.alpha
            if norm < best_norm:
                best, best_norm = Z.copy(), norm
            if first is None:
                first = it
        else:
            lam /= cfg.alpha
            # drop the momentum built up while lambda was growing, or it
            # carries the bounds deep into the infeasible region
            for v in velocity.values():
                v[...] = 0.0
        rows.append({"iter": it, "lam": lam, "loss": loss, "acc": acc,
                     "feasible": feasible, "bound_norm": norm})
    if best is None:
        raise InfeasibleMitigationError(
            f"no bound set met accuracy {cfg.accuracy} within {cfg.max_iter} iterations", rows)
    return MitigationResult(best, rows, dropped, first)


@dataclass
class ActivationProfile:
    layers: list[int]
    maxima: dict[int, np.ndarray]
    bounded_maxima: dict[int, np.ndarray] | None = None

    def rows(self) -> list[dict]:
        out = []
        for i in self.layers:
            for j, v in enumerate(self.maxima[i]):
                row = {"layer": i, "neuron": j, "max": float(v)}
                if self.bounded_maxima is not None:
                    row["bounded_max"] = float(self.bounded_maxima[i][j])
                out.append(row)
        return out


def _layer_maxima(model: Classifier, x, bounds: BoundSet | None, layers) -> dict[int, np.ndarray]:
    _, caches = model.forward(x, bounds=bounds if bounds is not None else BoundSet(), keep_cache=True)
    zmap = {} if bounds is None else bounds.bounds
    out = {}
    for i in layers:
        # ReLU cache holds its input; re-apply the activation and any clamp.
        act = np.maximum(caches[i][0], 0.0)
        if i in zmap:
            act = np.minimum(act, zmap[i].reshape((1, -1) + (1,) * (act.ndim - 2)))
        axes = (0,) + tuple(range(2, act.ndim))
        out[i] = act.max(axis=axes)
    return out


def activation_profile(model: Classifier, x, bounds: BoundSet | None = None, layers=None) -> ActivationProfile:
    """Per-neuron (per-filter for conv layers) activation maxima over ``x``."""
    layers = model.bounded_layer_indices() if layers is None else list(layers)
    x = np.asarray(x, dtype=np.float64)
    plain = _layer_maxima(model, x, None, layers)
    bounded = _layer_maxima(model, x, bounds, layers) if bounds is not None else None
    return ActivationProfile(layers, plain, bounded)
