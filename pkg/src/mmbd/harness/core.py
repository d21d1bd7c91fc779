"""In-memory building blocks shared by the CLI stages and the ensemble runner.

Every random draw comes from a named sub-stream of the root seed so a stage
can be re-run alone and still see the same data, poisons and weights.
"""

from __future__ import annotations

import numpy as np

from ..attacks import (
    DEFAULT_TOY_MEANS,
    TOY4_MEANS,
    AdaptiveConfig,
    Dataset,
    GaussianMixtureDomain,
    PoisonConfig,
    TriggerSpec,
    adaptive_finetune,
    blend_trigger,
    chessboard_trigger,
    derangement,
    patch_trigger,
    poison,
    sample_images,
    sample_toy,
    toy_trigger,
)
from ..detector import MarginSearchConfig, detect
from ..engine import Classifier, Conv2d, Dense, Flatten, ReLU, mlp
from ..mitigator import MitigationConfig
from ..training import TrainConfig, evaluate, train
from .config import ExperimentConfig, stream_seed

BOX = (0.0, 1.0)


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------- data


def toy_domain(num_classes: int) -> GaussianMixtureDomain:
    if num_classes == 3:
        return GaussianMixtureDomain(DEFAULT_TOY_MEANS, box=BOX)
    if num_classes == 4:
        return GaussianMixtureDomain(TOY4_MEANS, box=BOX)
    raise ScenarioError(f"toy-2d domain has layouts for 3 or 4 classes, not {num_classes}")


def _sample(cfg: ExperimentConfig, n: int, seed) -> Dataset:
    if cfg.domain == "toy-2d":
        return sample_toy(toy_domain(cfg.num_classes), n, seed)
    return sample_images(n, seed, num_classes=cfg.num_classes, noise=cfg.image_noise)


def make_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Clean train and test partitions. In the imbalance scenario the
    imbalance target keeps ``factor`` times as many training samples as
    every other class."""
    n = cfg.n_train_per_class
    if cfg.scenario != "imbalance":
        train_ds = _sample(cfg, n, stream_seed(seed, "data", 0))
    else:
        big = int(round(n * cfg.imbalance.factor))
        full = _sample(cfg, big, stream_seed(seed, "data", 0))
        rng = np.random.default_rng(stream_seed(seed, "imbalance"))
        keep = []
        for c in range(cfg.num_classes):
            pool = np.flatnonzero(full.y == c)
            keep.append(pool if c == cfg.imbalance.target else np.sort(rng.choice(pool, n, replace=False)))
        train_ds = full.subset(np.sort(np.concatenate(keep)))
    test_ds = _sample(cfg, cfg.n_test_per_class, stream_seed(seed, "data", 1))
    return train_ds, test_ds


# ---------------------------------------------------------------- triggers and poisoning


def make_trigger(cfg: ExperimentConfig, seed: int, index: int = 0) -> TriggerSpec:
    t = cfg.trigger
    if t.kind == "additive":
        direction = np.asarray(t.direction, dtype=np.float64)
        if index:
            # all-to-all: source s is pushed towards its own side of the box
            c, s = ((1, 0), (0, 1), (-1, 0), (0, -1))[(index - 1) % 4]
            rot = np.array([[c, -s], [s, c]], dtype=np.float64)
            direction = rot @ direction
        return toy_trigger(direction, t.norm, BOX)
    if t.kind == "patch":
        corner = tuple(t.patch_corner)
        if index:
            rng = np.random.default_rng(stream_seed(seed, "trigger", index))
            hi = 16 - t.patch_size
            corner = tuple(int(v) for v in rng.integers(0, hi + 1, 2))
        return patch_trigger(size=t.patch_size, corner=corner)
    if t.kind == "blend":
        return blend_trigger(stream_seed(seed, "trigger", index), alpha=t.blend_factor)
    return chessboard_trigger(magnitude=t.magnitude)


class AttackInfo:
    """Which classes were attacked and with what, enough to evaluate ASR."""

    def __init__(self, target=None, sources=(), trigger=None, pair_map=None, triggers=None):
        self.target = target
        self.sources = tuple(sources)
        self.trigger = trigger
        self.pair_map = pair_map
        self.triggers = triggers

    @property
    def targets(self) -> list[int]:
        if self.pair_map is not None:
            return sorted(set(self.pair_map.values()))
        return [] if self.target is None else [self.target]

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "sources": list(self.sources),
            "trigger": None if self.trigger is None else self.trigger.to_dict(),
            "pair_map": None if self.pair_map is None else {str(k): v for k, v in self.pair_map.items()},
            "triggers": None if self.triggers is None else {str(k): v.to_dict() for k, v in self.triggers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> AttackInfo:
        return cls(
            d["target"], d["sources"],
            None if d["trigger"] is None else TriggerSpec.from_dict(d["trigger"]),
            None if d["pair_map"] is None else {int(k): v for k, v in d["pair_map"].items()},
            None if d["triggers"] is None else {int(k): TriggerSpec.from_dict(v) for k, v in d["triggers"].items()},
        )


def make_attack(cfg: ExperimentConfig, train_ds: Dataset, seed: int) -> tuple[Dataset, AttackInfo]:
    pseed = stream_seed(seed, "poison")
    if not cfg.attacked:
        ds = Dataset(train_ds.x.copy(), train_ds.y.copy(), train_ds.num_classes, np.zeros(0, np.int64))
        return ds, AttackInfo()
    if cfg.scenario == "all-to-all":
        pair_map = derangement(cfg.num_classes, np.random.default_rng(stream_seed(seed, "pair-map")))
        triggers = {s: make_trigger(cfg, seed, s + 1) for s in pair_map}
        pc = PoisonConfig(count=cfg.poison.count, relabel=cfg.poison.relabel,
                          pair_map=pair_map, triggers=triggers)
        info = AttackInfo(pair_map=pair_map, triggers=triggers)
    else:
        trig = make_trigger(cfg, seed)
        pc = PoisonConfig(cfg.poison.target, cfg.sources, cfg.poison.count, trig, cfg.poison.relabel)
        info = AttackInfo(cfg.poison.target, cfg.sources, trig)
    ds, _ = poison(train_ds, pc, pseed)
    return ds, info


# ---------------------------------------------------------------- models


def image_net(num_classes: int = 4, side: int = 16) -> Classifier:
    layers = [Conv2d(1, 8, 3), ReLU(), Conv2d(8, 8, 3, stride=2), ReLU(),
              Conv2d(8, 16, 3), ReLU(), Flatten()]
    shape = (1, side, side)
    for layer in layers:
        shape = layer.out_shape(shape)
    flat = int(np.prod(shape))
    return Classifier(layers + [Dense(flat, 32), ReLU(), Dense(32, num_classes)], (1, side, side))


def build_model(cfg: ExperimentConfig, seed: int) -> Classifier:
    if cfg.domain == "toy-2d":
        model = mlp(2, cfg.hidden, cfg.num_classes)
    else:
        model = image_net(cfg.num_classes)
    return model.init(np.random.default_rng(stream_seed(seed, "init")))


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.optimizer, t.lr, t.batch_size, t.epochs, stream_seed(seed, "train"), t.reweight)


def fit(cfg: ExperimentConfig, ds: Dataset, seed: int):
    return train(build_model(cfg, seed), ds, train_config(cfg, seed))


def evaluate_attack(model: Classifier, test: Dataset, info: AttackInfo):
    if info.pair_map is not None:
        return evaluate(model, test, pair_map=info.pair_map, triggers=info.triggers)
    if info.trigger is not None:
        return evaluate(model, test, info.trigger, info.sources, info.target)
    return evaluate(model, test)


# ---------------------------------------------------------------- detection, mitigation, adaptive


def search_config(cfg: ExperimentConfig, seed: int) -> MarginSearchConfig:
    s = cfg.search
    return MarginSearchConfig(restarts=s.restarts, step=s.step, tol=s.tol, max_iter=s.max_iter,
                              lo=BOX[0], hi=BOX[1], seed=stream_seed(seed, "search") % 2**31)


def run_detection(cfg: ExperimentConfig, model: Classifier, seed: int, theta: float | None = None,
                  jobs: int = 1):
    return detect(model, search_config(cfg, seed), cfg.theta if theta is None else theta, jobs=jobs)


def mitigation_config(cfg: ExperimentConfig, seed: int) -> MitigationConfig:
    m = cfg.mitigation
    return MitigationConfig(m.per_class, m.accuracy, m.step, m.momentum, m.lam, m.alpha,
                            m.max_iter, m.init, m.min_ratio, m.init_scale, m.layers,
                            seed=stream_seed(seed, "mitigation"))


def adaptive_config(cfg: ExperimentConfig, seed: int, beta_m: float | None = None) -> AdaptiveConfig:
    a = cfg.adaptive
    return AdaptiveConfig(cfg.poison.target, a.beta_t, a.beta_b, a.beta_m if beta_m is None else beta_m,
                          a.enhanced, a.inner_steps, a.inner_restarts, a.epochs,
                          cfg.train.batch_size, a.lr, stream_seed(seed, "adaptive") % 2**31)


def run_adaptive(cfg: ExperimentConfig, model: Classifier, poisoned: Dataset, test: Dataset,
                 info: AttackInfo, seed: int, beta_m: float | None = None):
    def probe(m):
        return evaluate_attack(m, test, info).to_dict()

    return adaptive_finetune(model, poisoned, adaptive_config(cfg, seed, beta_m), BOX, probe)
