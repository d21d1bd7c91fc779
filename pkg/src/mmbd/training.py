"""Optimizers, the supervised training loop and ACC/ASR evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .engine import Classifier, InvalidInputError, cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p -= self.lr * b


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    reweight: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def class_weights(y: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency per-sample weights: every class carries N/K total mass."""
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    present = counts > 0
    per_class = np.zeros(num_classes)
    per_class[present] = len(y) / (present.sum() * counts[present])
    return per_class[y]


def train(model: Classifier, ds, cfg: TrainConfig) -> tuple[Classifier, list[dict]]:
    """Minibatch cross-entropy training in place. Returns the model and one
    history row per epoch (epoch, loss, acc)."""
    if len(ds) == 0:
        raise InvalidInputError("empty training set")
    if ds.y.max() >= model.num_classes or ds.y.min() < 0:
        raise InvalidInputError("label out of range for model")
    rng = np.random.default_rng(cfg.seed)
    opt = (Adam(model.params, lr=cfg.lr) if cfg.optimizer == "adam"
           else SGD(model.params, lr=cfg.lr))
    weights = class_weights(ds.y, model.num_classes) if cfg.reweight else None
    n = len(ds)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, caches = model.forward(ds.x[idx], keep_cache=True)
            loss, d = cross_entropy(logits, ds.y[idx], None if weights is None else weights[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            _, grads, _ = model.backward(caches, d)
            opt.step(grads)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == ds.y[idx]).sum())
        history.append({"epoch": epoch, "loss": total / n, "acc": correct / n})
    log.debug("trained %d epochs, final loss %.4f", cfg.epochs, history[-1]["loss"])
    return model, history


def train_imbalanced(model: Classifier, ds, cfg: TrainConfig) -> Classifier:
    """Training on a dataset whose largest class dominates; with
    ``cfg.reweight`` the loss is reweighted by inverse class frequency."""
    counts = ds.class_counts()
    if counts.max() == counts[counts > 0].min():
        raise ValueError("dataset has no dominant class")
    model, _ = train(model, ds, cfg)
    return model


def history_rows(history: list[dict]) -> str:
    lines = ["epoch,loss,acc"]
    lines += [f"{h['epoch']},{h['loss']:.17g},{h['acc']:.17g}" for h in history]
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    acc: float
    asr: float | None
    per_class_acc: list[float]

    def to_dict(self):
        return {"acc": self.acc, "asr": self.asr, "per_class_acc": self.per_class_acc}


def predict(model: Classifier, x: np.ndarray, batch: int = 2048) -> np.ndarray:
    out = [model.forward(x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Classifier, test, trigger=None, sources=(), target=None,
             pair_map=None, triggers=None) -> EvalReport:
    """Clean accuracy, per-class accuracy and attack success rate.

    ASR is the fraction of triggered source-class test samples classified
    as the target. For all-to-all attacks pass ``pair_map`` and ``triggers``
    (one trigger per source) instead.
    """
    if len(test) == 0:
        raise InvalidInputError("empty test partition")
    pred = predict(model, test.x)
    acc = float(np.mean(pred == test.y))
    per_class = []
    for c in range(model.num_classes):
        sel = test.y == c
        per_class.append(float(np.mean(pred[sel] == c)) if sel.any() else float("nan"))
    asr = None
    if pair_map is not None:
        hits = total = 0
        for s, t in sorted(pair_map.items()):
            xs = test.x[test.y == s]
            hits += int((predict(model, triggers[s].apply(xs)) == t).sum())
            total += len(xs)
        asr = hits / total if total else None
    elif trigger is not None:
        xs = test.x[np.isin(test.y, list(sources))]
        if len(xs) == 0:
            raise InvalidInputError("no source-class samples in test set")
        asr = float(np.mean(predict(model, trigger.apply(xs)) == target))
    return EvalReport(acc, asr, per_class)
