"""Optimisers, the mini-batch training loop, and stratified cross-validation."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, stratified_kfold_indices
from .errors import ConfigError, ContractError, DivergedError, ShapeError
from .layers import LayerParams, cross_entropy
from .models import ModelSpec, ModelState, build, forward, predict
from .tensor import backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

def _grads(params: LayerParams):
    items = params.trainable_items()
    for name, t in items:
        if t.grad is None:
            raise ContractError(f"trainable parameter {name} has no gradient")
    return items


def sgd_step(params: LayerParams, lr: float) -> None:
    """theta <- theta - lr * g on trainable parameters, then clear gradients."""
    for _, t in _grads(params):
        t.data -= lr * t.grad
    params.zero_grad()


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: LayerParams, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; ``state`` is updated in place and returned."""
    b1, b2 = betas
    items = _grads(params)
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in items:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    params.zero_grad()
    return state


# --------------------------------------------------------------------------
# history
# --------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    valid_acc: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def record(self, loss, acc, valid=None) -> None:
        self.train_loss.append(float(loss))
        self.train_acc.append(float(acc))
        self.valid_acc.append(None if valid is None else float(valid))

    def loss_increases(self, after: int = 5) -> list[int]:
        """1-based epochs (past ``after``) whose loss rose over the previous epoch."""
        return [e + 1 for e in range(max(after, 1), len(self.train_loss))
                if self.train_loss[e] > self.train_loss[e - 1]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "valid_acc"])
        for i, (l, a, v) in enumerate(zip(self.train_loss, self.train_acc, self.valid_acc), 1):
            w.writerow([i, repr(l), repr(a), "" if v is None else repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        h = cls()
        for row in csv.DictReader(io.StringIO(text)):
            h.record(float(row["train_loss"]), float(row["train_acc"]),
                     float(row["valid_acc"]) if row["valid_acc"] else None)
        return h


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _arrays(data, dtype):
    if isinstance(data, Dataset):
        return data.pixels(dtype), data.labels
    X, y = data
    return np.asarray(X, dtype=dtype), np.asarray(y, dtype=np.int64)


def evaluate_accuracy(model: ModelState, data) -> float:
    X, y = _arrays(data, model.spec.np_dtype)
    return float(np.mean(predict(model, X) == y)) if len(y) else float("nan")


def train_loop(model: ModelState, train, valid=None, cfg: TrainConfig = TrainConfig(),
               on_epoch=None) -> tuple[ModelState, TrainHistory]:
    """Mini-batch training; the trailing partial batch is kept.

    ``train``/``valid`` are datasets or ``(X, y)`` pairs.  The reported
    training accuracy counts predictions made during the epoch, before each
    batch's update.
    """
    X, y = _arrays(train, model.spec.np_dtype)
    if len(y) == 0:
        raise ContractError("training set is empty")
    spec = model.spec
    if X.shape[1:] != (spec.height, spec.width, spec.channels):
        raise ContractError(f"images {X.shape[1:]} do not match model input "
                            f"{(spec.height, spec.width, spec.channels)}")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    history = TrainHistory()
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum, correct = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size), 1):
            idx = order[start:start + cfg.batch_size]
            # overflow shows up as a non-finite loss below; numpy's own warning adds nothing
            with np.errstate(over="ignore", invalid="ignore"):
                logits = forward(model, X[idx])
                loss = cross_entropy(logits, y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedError(epoch, step, value)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            backward(loss)
            if cfg.optimizer == "sgd":
                sgd_step(model.params, cfg.learning_rate)
            else:
                adam_step(model.params, adam, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
        va = evaluate_accuracy(model, valid) if valid is not None else None
        history.record(loss_sum / n, correct / n, va)
        model.metadata["epoch"] = int(model.metadata.get("epoch", 0)) + 1
        if on_epoch is not None:
            on_epoch(epoch, history)
        log.debug("epoch %d loss %.6f acc %.4f", epoch, history.train_loss[-1], history.train_acc[-1])
    rises = history.loss_increases()
    if rises:
        log.warning("training loss rose after epoch 5 at epochs %s", rises)
    return model, history


def derive_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


@dataclass
class FoldResult:
    fold: int
    history: TrainHistory
    valid_indices: np.ndarray
    predictions: np.ndarray
    accuracy: float
    model: ModelState | None = None


@dataclass
class CVResult:
    folds: list[FoldResult]

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def cross_validate(spec: ModelSpec, ds, k: int, cfg: TrainConfig, prepare=None,
                   keep_models: bool = False) -> CVResult:
    """Stratified k-fold: one fresh model per fold, trained on the other k - 1.

    Model and shuffle seeds are derived from the fold index. ``prepare``
    (e.g. a freezing function) is applied to each fresh model.
    """
    if k < 2:
        raise ConfigError("k must be at least 2")
    X, y = _arrays(ds, spec.np_dtype)
    C = len(ds.class_names) if isinstance(ds, Dataset) else spec.num_classes
    plan = stratified_kfold_indices(y, C, k, cfg.seed)
    results = []
    for i, valid_idx in enumerate(plan.folds):
        train_idx = plan.train_indices(i)
        model = build(dataclasses.replace(spec, seed=derive_seed(spec.seed, i)))
        if prepare is not None:
            prepare(model)
        fold_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, i))
        try:
            model, hist = train_loop(model, (X[train_idx], y[train_idx]),
                                     (X[valid_idx], y[valid_idx]), fold_cfg)
        except DivergedError as exc:
            raise DivergedError(exc.epoch, exc.step, exc.loss, fold=i) from exc
        except (ContractError, ConfigError, ShapeError) as exc:
            raise type(exc)(f"fold {i}: {exc}") from exc
        preds = predict(model, X[valid_idx])
        results.append(FoldResult(i, hist, valid_idx, preds, float(np.mean(preds == y[valid_idx])),
                                  model if keep_models else None))
    return CVResult(results)
