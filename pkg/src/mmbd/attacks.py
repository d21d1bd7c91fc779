"""Synthetic domains, trigger embedding, poisoning and the detector-aware attack."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import Classifier, cross_entropy, runner_up

log = logging.getLogger(__name__)


class InvalidTriggerError(ValueError):
    pass


class PoisonError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    poison_idx: np.ndarray | None = None

    def __len__(self):
        return int(self.x.shape[0])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def clean_part(self) -> Dataset:
        if self.poison_idx is None or len(self.poison_idx) == 0:
            return Dataset(self.x, self.y, self.num_classes)
        keep = np.setdiff1d(np.arange(len(self)), self.poison_idx)
        return self.subset(keep)


# ---------------------------------------------------------------- toy 2-D domain

# Four components per class on a 3x4 grid confined to the left half of the box.
# The outer columns alternate classes 0 and 2, the middle column is class 1.
# A 3-hidden-layer MLP lands near 91% clean accuracy at the default
# covariance, and the empty right half leaves room for the toy trigger.
DEFAULT_TOY_MEANS = (
    ((0.08, 0.14), (0.44, 0.14), (0.08, 0.62), (0.44, 0.62)),
    ((0.26, 0.14), (0.26, 0.38), (0.26, 0.62), (0.26, 0.86)),
    ((0.08, 0.38), (0.44, 0.38), (0.08, 0.86), (0.44, 0.86)),
)

# Four-class variant (all-to-all experiments): a 4x4 grid with Latin-square
# labels in the middle of the box, leaving a free margin on every side so
# each source class can be pushed towards its own edge.
_GRID4 = (0.3, 0.43, 0.57, 0.7)
TOY4_MEANS = tuple(
    tuple((x, y) for i, x in enumerate(_GRID4) for j, y in enumerate(_GRID4) if (i + j) % 4 == c)
    for c in range(4)
)


@dataclass
class GaussianMixtureDomain:
    means: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_TOY_MEANS, dtype=np.float64))
    covs: np.ndarray | None = None
    weights: np.ndarray | None = None
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        k, m, d = self.means.shape
        if self.covs is None:
            self.covs = np.broadcast_to(0.003 * np.eye(d), (k, m, d, d)).copy()
        if self.weights is None:
            self.weights = np.full((k, m), 1.0 / m)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.allclose(self.weights.sum(axis=1), 1.0):
            raise ValueError("mixture weights must sum to 1 per class")
        for cov in self.covs.reshape(-1, d, d):
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < 0:
                raise ValueError("covariances must be symmetric positive (semi)definite")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.means.shape[2],)


def sample_toy(domain: GaussianMixtureDomain, n_per_class: int, seed) -> Dataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    k, m, d = domain.means.shape
    xs, ys = [], []
    for c in range(k):
        comp = rng.choice(m, size=n_per_class, p=domain.weights[c])
        noise = rng.standard_normal((n_per_class, d))
        # Cholesky fails on singular covariances, eigen-factor does not.
        for j in range(m):
            vals, vecs = np.linalg.eigh(domain.covs[c, j])
            root = vecs * np.sqrt(np.clip(vals, 0.0, None))
            sel = comp == j
            noise[sel] = noise[sel] @ root.T
        xs.append(domain.means[c, comp] + noise)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), k)


# ---------------------------------------------------------------- synthetic images

IMAGE_SIDE = 16
# shapes are kept dim so a full-brightness patch stands out in activation space
SHAPE_INTENSITY = (0.1, 0.25)


def _shape_image(cls: int, rng: np.random.Generator, side: int) -> np.ndarray:
    img = np.zeros((side, side))
    rr, cc = np.mgrid[0:side, 0:side]
    cy, cx = rng.uniform(5.0, side - 6.0, size=2)
    inten = rng.uniform(*SHAPE_INTENSITY)
    if cls == 0:  # horizontal bar
        half = rng.uniform(3.0, 5.0)
        img[(np.abs(rr - cy) <= 1.0) & (np.abs(cc - cx) <= half)] = inten
    elif cls == 1:  # vertical bar
        half = rng.uniform(3.0, 5.0)
        img[(np.abs(cc - cx) <= 1.0) & (np.abs(rr - cy) <= half)] = inten
    elif cls == 2:  # ring
        rad = rng.uniform(2.5, 4.0)
        dist = np.hypot(rr - cy, cc - cx)
        img[np.abs(dist - rad) <= 0.8] = inten
    else:  # filled square
        half = rng.uniform(1.5, 2.5)
        img[(np.abs(rr - cy) <= half) & (np.abs(cc - cx) <= half)] = inten
    return img


def sample_images(n_per_class: int, seed, num_classes: int = 4, side: int = IMAGE_SIDE,
                  noise: float = 0.03) -> Dataset:
    """Parametric shapes (bar, bar, ring, square) on a noisy dark background."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(num_classes):
        for _ in range(n_per_class):
            img = _shape_image(c % 4, rng, side) + noise * rng.standard_normal((side, side))
            xs.append(np.clip(img, 0.0, 1.0)[None])
            ys.append(c)
    return Dataset(np.stack(xs), np.array(ys, dtype=np.int64), num_classes)


# ---------------------------------------------------------------- triggers


@dataclass
class TriggerSpec:
    kind: str
    pattern: np.ndarray
    mask: np.ndarray | None = None
    blend_factor: float | None = None
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.kind not in ("additive", "patch", "blend"):
            raise InvalidTriggerError(f"unknown trigger kind {self.kind!r}")
        if not self.lo < self.hi:
            raise InvalidTriggerError("clip bounds need lo < hi")
        if self.kind == "additive":
            if self.blend_factor is not None:
                raise InvalidTriggerError("blend_factor only applies to blend triggers")
            return
        if self.mask is None:
            raise InvalidTriggerError(f"{self.kind} trigger needs a mask")
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != self.pattern.shape:
            raise InvalidTriggerError("mask and pattern shapes differ")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise InvalidTriggerError("mask must be binary")
        if self.kind == "blend":
            if self.blend_factor is None or not 0.0 < self.blend_factor < 1.0:
                raise InvalidTriggerError("blend factor must lie in (0, 1)")
        elif self.blend_factor is not None:
            raise InvalidTriggerError("blend_factor only applies to blend triggers")

    def apply(self, x) -> np.ndarray:
        return embed(self, x)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pattern": self.pattern.tolist(),
                "mask": None if self.mask is None else self.mask.tolist(),
                "blend_factor": self.blend_factor, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> TriggerSpec:
        return cls(d["kind"], np.asarray(d["pattern"]),
                   None if d.get("mask") is None else np.asarray(d["mask"]),
                   d.get("blend_factor"), d.get("lo", 0.0), d.get("hi", 1.0))


def embed(trigger: TriggerSpec, x) -> np.ndarray:
    """Embed the trigger in one sample or a batch; result stays in [lo, hi]."""
    x = np.asarray(x, dtype=np.float64)
    shape = trigger.pattern.shape
    if x.shape != shape and x.shape[1:] != shape:
        raise InvalidTriggerError(f"input shape {x.shape} does not match trigger {shape}")
    if trigger.kind == "additive":
        out = x + trigger.pattern
    elif trigger.kind == "patch":
        out = (1.0 - trigger.mask) * x + trigger.mask * trigger.pattern
    else:
        a = trigger.blend_factor * trigger.mask
        out = (1.0 - a) * x + a * trigger.pattern
    return np.clip(out, trigger.lo, trigger.hi)


def toy_trigger(direction=(1.0, 0.0), norm: float = 0.55, box=(0.0, 1.0)) -> TriggerSpec:
    v = np.asarray(direction, dtype=np.float64)
    v = norm * v / np.linalg.norm(v)
    return TriggerSpec("additive", v, lo=box[0], hi=box[1])


def patch_trigger(side: int = IMAGE_SIDE, size: int = 3, corner=(7, 7), value: float = 1.0) -> TriggerSpec:
    """Unicolor square patch. The default sits where the shapes live, so only
    its brightness (not its position) sets it apart from clean content."""
    mask = np.zeros((1, side, side))
    r, c = corner
    mask[0, r : r + size, c : c + size] = 1.0
    return TriggerSpec("patch", value * mask, mask.copy())


def blend_trigger(seed=0, side: int = IMAGE_SIDE, alpha: float = 0.2) -> TriggerSpec:
    rng = np.random.default_rng(seed)
    return TriggerSpec("blend", rng.uniform(0, 1, (1, side, side)), np.ones((1, side, side)),
                       blend_factor=alpha)


def chessboard_trigger(side: int = IMAGE_SIDE, magnitude: float = 0.03) -> TriggerSpec:
    board = np.where(np.add.outer(np.arange(side), np.arange(side)) % 2 == 0, 1.0, -1.0)
    return TriggerSpec("additive", magnitude * board[None])


# ---------------------------------------------------------------- poisoning


@dataclass
class PoisonConfig:
    """Single-target (``target`` + ``sources``) or all-to-all (``pair_map``)
    poisoning. In all-to-all mode ``triggers`` holds one trigger per source."""

    target: int | None = None
    sources: tuple[int, ...] = ()
    count: int = 0
    trigger: TriggerSpec | None = None
    relabel: bool = True
    pair_map: dict[int, int] | None = None
    triggers: dict[int, TriggerSpec] | None = None

    def __post_init__(self):
        if self.count < 0:
            raise PoisonError("poison count must be non-negative")
        if self.pair_map is not None:
            if set(self.pair_map) != set(self.pair_map.values()):
                raise PoisonError("all-to-all map must be a permutation")
            if any(s == t for s, t in self.pair_map.items()):
                raise PoisonError("all-to-all map has a fixed point")
            if self.triggers is None or set(self.triggers) != set(self.pair_map):
                raise PoisonError("all-to-all mode needs one trigger per source class")
        else:
            if self.target is None or self.trigger is None:
                raise PoisonError("single-target mode needs target and trigger")
            if self.target in self.sources:
                raise PoisonError("target class cannot be a source class")
            if not self.sources:
                raise PoisonError("no source classes")

    def groups(self):
        """(source classes, target, trigger, count) per poison group."""
        if self.pair_map is None:
            return [(tuple(self.sources), self.target, self.trigger, self.count)]
        return [((s,), t, self.triggers[s], self.count) for s, t in sorted(self.pair_map.items())]


def derangement(k: int, rng: np.random.Generator) -> dict[int, int]:
    while True:
        perm = rng.permutation(k)
        if np.all(perm != np.arange(k)):
            return {int(i): int(p) for i, p in enumerate(perm)}


def poison(ds: Dataset, cfg: PoisonConfig, seed) -> tuple[Dataset, np.ndarray]:
    """Append triggered copies of source-class samples.

    Returns the grown dataset and the indices of the appended records. The
    original samples keep their positions and values.
    """
    rng = np.random.default_rng(seed)
    new_x, new_y = [], []
    for sources, target, trigger, count in cfg.groups():
        if count == 0:
            continue
        pool = np.flatnonzero(np.isin(ds.y, sources))
        if len(pool) < count:
            raise PoisonError(f"only {len(pool)} source samples for {count} poisons")
        pick = np.sort(rng.choice(pool, size=count, replace=False))
        new_x.append(embed(trigger, ds.x[pick]))
        new_y.append(np.full(count, target, dtype=np.int64) if cfg.relabel else ds.y[pick].copy())
    n = len(ds)
    if not new_x:
        return Dataset(ds.x.copy(), ds.y.copy(), ds.num_classes, np.zeros(0, np.int64)), np.zeros(0, np.int64)
    x = np.concatenate([ds.x] + new_x)
    y = np.concatenate([ds.y] + new_y)
    idx = np.arange(n, len(x), dtype=np.int64)
    return Dataset(x, y, ds.num_classes, idx), idx


# ---------------------------------------------------------------- adaptive attack


@dataclass
class AdaptiveConfig:
    target: int
    beta_t: float = 1.0
    beta_b: float = 1.0
    beta_m: float = 1e-4
    enhanced: bool = False
    inner_steps: int = 200
    inner_restarts: int = 5
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.beta_t <= 0:
            raise ValueError("beta_t must be positive")
        if self.beta_b < 0 or self.beta_m < 0:
            raise ValueError("beta_b and beta_m must be non-negative")


@dataclass
class AdaptiveLog:
    epochs: list[dict] = field(default_factory=list)
    inner_calls: int = 0


def _margin_param_grad(model: Classifier, x: np.ndarray, cls: int):
    logits, caches = model.forward(x[None], keep_cache=True)
    k = runner_up(logits, cls)[0]
    d = np.zeros_like(logits)
    d[0, cls], d[0, k] = 1.0, -1.0
    _, grads, _ = model.backward(caches, d)
    return float(logits[0, cls] - logits[0, k]), grads


def adaptive_finetune(model: Classifier, poisoned: Dataset, cfg: AdaptiveConfig,
                      box=(0.0, 1.0), eval_fn=None) -> tuple[Classifier, AdaptiveLog]:
    """Fine-tune a backdoored model while suppressing the target's maximum margin.

    Each outer step first maximizes the target-class margin over the input box
    with the parameters frozen, then takes one Adam step on
    ``beta_t * CE(clean) + beta_b * CE(poisoned) + beta_m * L_M``. With
    ``enhanced`` the margins of all other classes are maximized too and
    subtracted from L_M. ``eval_fn(model)`` may return a dict of per-epoch
    metrics to log.
    """
    from .detector import MarginSearchConfig, maximize_margin
    from .training import Adam

    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    if poisoned.poison_idx is None:
        raise PoisonError("adaptive fine-tuning needs a poison index table")
    is_poison = np.zeros(len(poisoned), dtype=bool)
    is_poison[poisoned.poison_idx] = True
    log_ = AdaptiveLog()
    K = model.num_classes
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(poisoned))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = [np.zeros_like(p) for p in model.params]
            for flag, beta in ((False, cfg.beta_t), (True, cfg.beta_b)):
                part = idx[is_poison[idx] == flag]
                if beta == 0 or len(part) == 0:
                    continue
                logits, caches = model.forward(poisoned.x[part], keep_cache=True)
                _, d = cross_entropy(logits, poisoned.y[part])
                _, g, _ = model.backward(caches, d)
                for acc, gi in zip(grads, g):
                    acc += beta * gi
            if cfg.beta_m > 0:
                classes = range(K) if cfg.enhanced else [cfg.target]
                for c in classes:
                    search = MarginSearchConfig(restarts=cfg.inner_restarts, max_iter=cfg.inner_steps,
                                                lo=box[0], hi=box[1], seed=int(rng.integers(2**31)))
                    res = maximize_margin(model, c, search)
                    log_.inner_calls += 1
                    _, g = _margin_param_grad(model, res.x, c)
                    sign = 1.0 if c == cfg.target else -1.0
                    for acc, gi in zip(grads, g):
                        acc += sign * cfg.beta_m * gi
            opt.step(grads)
        row = {"epoch": epoch}
        if eval_fn is not None:
            row.update(eval_fn(model))
        log_.epochs.append(row)
        log.info("adaptive epoch %d %s", epoch, row)
    return model, log_
