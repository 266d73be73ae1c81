"""Ridge regression on one-hot field indicators, the reference point for the attention model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FieldSchema


@dataclass
class LinearBaseline:
    schema: FieldSchema
    intercept: float
    weights: np.ndarray  # concatenated one-hot blocks in schema order
    scale: tuple[float, float]

    def design(self, indices) -> np.ndarray:
        return one_hot(self.schema, indices)

    def predict_raw(self, indices) -> np.ndarray:
        return self.intercept + self.design(indices) @ self.weights

    def predict(self, indices) -> np.ndarray:
        return np.clip(self.predict_raw(indices), *self.scale)


def one_hot(schema: FieldSchema, indices) -> np.ndarray:
    idx = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    offsets = np.cumsum([0] + [f.vocab_size for f in schema])
    out = np.zeros((idx.shape[0], offsets[-1]))
    rows = np.arange(idx.shape[0])
    for j in range(len(schema)):
        out[rows, offsets[j] + idx[:, j]] = 1.0
    return out


def linear_baseline_fit(indices, targets, schema: FieldSchema, l2: float = 1.0,
                        scale: tuple[float, float] = (1.0, 5.0)) -> LinearBaseline:
    """Solve the ridge normal equations; the intercept is not penalised."""
    if not l2 > 0:
        raise ValueError(f"l2 must be positive so the normal equations stay non-singular, got {l2}")
    y = np.asarray(targets, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot fit a baseline on an empty training set")
    x = one_hot(schema, indices)
    x_mean, y_mean = x.mean(axis=0), y.mean()
    xc = x - x_mean
    w = np.linalg.solve(xc.T @ xc + l2 * np.eye(x.shape[1]), xc.T @ (y - y_mean))
    return LinearBaseline(schema, float(y_mean - x_mean @ w), w, (float(scale[0]), float(scale[1])))


def linear_baseline_predict(b: LinearBaseline, ex) -> float | np.ndarray:
    idx = np.asarray(getattr(ex, "indices", ex), dtype=np.int64)
    out = b.predict(idx)
    return float(out[0]) if idx.ndim == 1 else out
