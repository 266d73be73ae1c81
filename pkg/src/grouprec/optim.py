"""Squared-error loss, Adagrad updates and the training loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .tensor import SeededRng, ShapeError


def mse_loss(preds, targets) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``preds``."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"preds and targets differ in length: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("mse_loss needs at least one prediction")
    diff = p - t
    return float(np.mean(diff * diff)), 2.0 * diff / p.size


@dataclass
class AdagradState:
    """Running sums of squared gradients, one array per parameter block."""

    accum: dict
    eta: float = 0.01
    eps: float = 1e-8
    steps: int = 0

    @classmethod
    def for_model(cls, model: Model, eta: float = 0.01, eps: float = 1e-8) -> "AdagradState":
        return cls({k: np.zeros_like(v) for k, (v, _) in model.parameters().items()}, eta, eps)

    def effective_rate(self, name: str) -> np.ndarray:
        return self.eta / np.sqrt(self.accum[name] + self.eps)


def adagrad_step(state: AdagradState, model: Model) -> None:
    """``S += g**2; theta -= eta * g / sqrt(S + eps)`` per element. Gradients are left as-is."""
    params = model.parameters()
    if params.keys() != state.accum.keys():
        raise ShapeError("optimizer state does not match model parameter blocks")
    for name, (theta, g) in params.items():
        s = state.accum[name]
        if s.shape != theta.shape:
            raise ShapeError(f"optimizer state for {name!r} is {s.shape}, parameter is {theta.shape}")
        s += g * g
        theta -= state.eta * g / np.sqrt(s + state.eps)
    state.steps += 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    eta: float = 0.01
    eps: float = 1e-8
    early_stop_patience: int = 20
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.eta > 0 or not self.eps > 0:
            raise ValueError("eta and eps must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_rmse: float
    val_mse: float
    val_rmse: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1  # index into records

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch]

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,train_rmse,val_mse,val_rmse"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_mse!r},{r.train_rmse!r},{r.val_mse!r},{r.val_rmse!r}")
        return "\n".join(lines) + "\n"


def train_epoch(model: Model, x: np.ndarray, y: np.ndarray, state: AdagradState,
                cfg: TrainConfig, rng: SeededRng) -> float:
    """One shuffled pass over ``(x, y)``; returns the batch-size-weighted mean training loss."""
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        b = order[start:start + cfg.batch_size]
        model.zero_grads()
        preds, cache = model.forward(x[b])
        loss, dpreds = mse_loss(preds, y[b])
        if not math.isfinite(loss):
            raise FloatingPointError(f"training loss became non-finite ({loss})")
        model.backward(cache, dpreds)
        adagrad_step(state, model)
        total += loss * len(b)
    return total / n


def predict_batched(model: Model, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([model.predict(x[i:i + batch]) for i in range(0, len(x), batch)])


def fit(model: Model, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        cfg: TrainConfig, state: AdagradState | None = None) -> TrainHistory:
    """Train with early stopping on validation RMSE, then restore the best epoch's parameters.

    ``train`` and ``val`` are ``(indices, targets)`` pairs as produced by
    ``encode_dataset``.
    """
    x_tr, y_tr = train
    x_val, y_val = val
    state = state or AdagradState.for_model(model, cfg.eta, cfg.eps)
    rng = SeededRng(cfg.seed).child("shuffle")
    hist = TrainHistory()
    best_rmse, best_snap, since_best = math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        train_mse = train_epoch(model, x_tr, y_tr, state, cfg, rng.child(epoch))
        val_mse, _ = mse_loss(predict_batched(model, x_val), y_val)
        rec = EpochRecord(epoch, train_mse, math.sqrt(train_mse), val_mse, math.sqrt(val_mse),
                          time.perf_counter() - t0)
        hist.records.append(rec)
        if rec.val_rmse < best_rmse:
            best_rmse, best_snap, since_best = rec.val_rmse, model.snapshot(), 0
            hist.best_epoch = len(hist.records) - 1
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    if best_snap is not None:
        model.restore(best_snap)
    model.zero_grads()
    return hist
