"""Trainable building blocks with explicit forward and backward passes.

Every layer takes its input either as a single example (``F x d`` token
matrix, or a vector for dense layers) or with one extra leading batch axis.
Backward passes *accumulate* into the parameter ``grads`` arrays and return
the gradient with respect to the layer input; callers zero the accumulators
between optimizer steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NumericError, SeededRng, ShapeError

EMBED_INIT = 0.05


class FieldLookupError(IndexError):
    """Categorical index outside an embedding table's vocabulary."""


class ConfigError(ValueError):
    """Inconsistent layer or model configuration."""


# --------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    name: str
    weights: np.ndarray
    grads: np.ndarray = field(default=None, repr=False)
    lookups: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.grads is None:
            self.grads = np.zeros_like(self.weights)

    @classmethod
    def init(cls, name: str, vocab_size: int, dim: int, rng: SeededRng) -> "EmbeddingTable":
        return cls(name, rng.uniform(-EMBED_INIT, EMBED_INIT, (vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def _check(self, index):
        idx = np.asarray(index)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab_size):
            bad = idx[(idx < 0) | (idx >= self.vocab_size)].ravel()[0]
            raise FieldLookupError(
                f"field {self.name!r}: index {int(bad)} out of range for vocabulary of size {self.vocab_size}"
            )
        return idx

    def lookup(self, index):
        """Row(s) of the table; returns a copy."""
        idx = self._check(index)
        self.lookups += int(idx.size)
        return self.weights[idx].copy()

    def backward(self, index, upstream) -> None:
        idx = self._check(index)
        up = np.asarray(upstream, dtype=np.float64).reshape(idx.shape + (self.dim,))
        np.add.at(self.grads, idx, up)


def embed_lookup(table: EmbeddingTable, index: int) -> np.ndarray:
    return table.lookup(index)


def embed_backward(table: EmbeddingTable, index: int, upstream) -> None:
    table.backward(index, upstream)


# --------------------------------------------------------------------------
# multi-head attention over field tokens


@dataclass
class MhaParams:
    """Per-head projections stacked as ``(heads, d, d_h)`` plus the output map.

    ``scale_by`` picks the score denominator: ``"head"`` divides by sqrt(d_h),
    ``"model"`` by sqrt(d).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    scale_by: str = "head"
    grads: dict = field(default=None, repr=False)

    def __post_init__(self):
        h, d, d_h = self.w_q.shape
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != (h, d, d_h):
                raise ConfigError(f"{name} shape {getattr(self, name).shape} != w_q shape {(h, d, d_h)}")
        if h * d_h != d:
            raise ConfigError(f"heads * d_h must equal d, got {h} * {d_h} != {d}")
        if self.w_o.shape != (h * d_h, d):
            raise ConfigError(f"w_o must be {(h * d_h, d)}, got {self.w_o.shape}")
        if self.scale_by not in ("head", "model"):
            raise ConfigError(f"scale_by must be 'head' or 'model', got {self.scale_by!r}")
        if self.grads is None:
            self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}

    @classmethod
    def init(cls, d: int, heads: int, d_h: int, rng: SeededRng, scale_by: str = "head") -> "MhaParams":
        if heads < 1 or d_h < 1 or heads * d_h != d:
            raise ConfigError(f"heads * d_h must equal d, got {heads} * {d_h} != {d}")
        lim = 1.0 / math.sqrt(d)
        w_q, w_k, w_v = (rng.uniform(-lim, lim, (heads, d, d_h)) for _ in range(3))
        lim_o = 1.0 / math.sqrt(heads * d_h)
        return cls(w_q, w_k, w_v, rng.uniform(-lim_o, lim_o, (heads * d_h, d)), scale_by)

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_q.shape[2]

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_h if self.scale_by == "head" else self.d)

    def params(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class MhaCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # (..., h, F, F), row-stochastic
    concat: np.ndarray


def _softmax_last(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mha_forward(p: MhaParams, x) -> tuple[np.ndarray, MhaCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != p.d or x.shape[-2] < 1:
        raise ShapeError(f"attention input must be (F, {p.d}) or (B, F, {p.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("attention input contains non-finite values")
    xh = x[..., None, :, :]  # (..., 1, F, d) broadcasts against (h, d, d_h)
    q = xh @ p.w_q
    k = xh @ p.w_k
    v = xh @ p.w_v
    attn = _softmax_last((q @ np.swapaxes(k, -1, -2)) * p.score_scale)
    heads = attn @ v  # (..., h, F, d_h)
    concat = np.swapaxes(heads, -3, -2)
    concat = concat.reshape(concat.shape[:-2] + (p.heads * p.d_h,))
    z = concat @ p.w_o
    return z, MhaCache(x, q, k, v, attn, concat)


def mha_backward(p: MhaParams, cache: MhaCache, dz) -> np.ndarray:
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != cache.x.shape:
        raise ShapeError(f"upstream gradient {dz.shape} does not match cached input {cache.x.shape}")
    h, d_h = p.heads, p.d_h
    g = p.grads
    g["w_o"] += cache.concat.reshape(-1, h * d_h).T @ dz.reshape(-1, p.d)
    dconcat = dz @ p.w_o.T
    dheads = np.swapaxes(dconcat.reshape(dconcat.shape[:-1] + (h, d_h)), -3, -2)
    a = cache.attn
    dattn = dheads @ np.swapaxes(cache.v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ dheads
    # softmax Jacobian, row by row
    dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True)) * p.score_scale
    dq = dscores @ cache.k
    dk = np.swapaxes(dscores, -1, -2) @ cache.q
    # fold any batch axis so per-head weight grads sum over it
    x = cache.x.reshape((-1,) + cache.x.shape[-2:])
    dq, dk, dv = (t.reshape((-1,) + t.shape[-3:]) for t in (dq, dk, dv))
    g["w_q"] += np.einsum("bfd,bhfe->hde", x, dq)
    g["w_k"] += np.einsum("bfd,bhfe->hde", x, dk)
    g["w_v"] += np.einsum("bfd,bhfe->hde", x, dv)
    dx = (
        np.einsum("bhfe,hde->bfd", dq, p.w_q)
        + np.einsum("bhfe,hde->bfd", dk, p.w_k)
        + np.einsum("bhfe,hde->bfd", dv, p.w_v)
    )
    return dx.reshape(cache.x.shape)


# --------------------------------------------------------------------------
# layer normalization (no learned gain or bias)


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def layernorm_forward(x, eps: float = 1e-5) -> tuple[np.ndarray, LayerNormCache]:
    if not eps > 0:
        raise ValueError(f"layer norm eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) / sigma
    return xhat, LayerNormCache(xhat, mu, sigma)


def layernorm_backward(cache: LayerNormCache, dy) -> np.ndarray:
    dy = np.asarray(dy, dtype=np.float64)
    xhat = cache.xhat
    return (
        dy - dy.mean(axis=-1, keepdims=True) - xhat * np.mean(dy * xhat, axis=-1, keepdims=True)
    ) / cache.sigma


# --------------------------------------------------------------------------
# dense layers


@dataclass
class DenseParams:
    """Affine map ``y = w @ x + b`` with ``w`` of shape ``(out, in)``."""

    w: np.ndarray
    b: np.ndarray
    grads: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeError(f"dense weights {self.w.shape} and bias {self.b.shape} disagree")
        if self.grads is None:
            self.grads = {"w": np.zeros_like(self.w), "b": np.zeros_like(self.b)}

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: SeededRng) -> "DenseParams":
        lim = 1.0 / math.sqrt(n_in)
        return cls(rng.uniform(-lim, lim, (n_out, n_in)), np.zeros(n_out))

    def params(self) -> dict:
        return {"w": self.w, "b": self.b}


@dataclass
class DenseCache:
    x: np.ndarray
    pre: np.ndarray
    activation: str


def dense_forward(p: DenseParams, x, activation: str = "none") -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.w.shape[1]:
        raise ShapeError(f"dense layer expects input width {p.w.shape[1]}, got {x.shape}")
    pre = x @ p.w.T + p.b
    if activation == "relu":
        y = np.maximum(pre, 0.0)
    elif activation == "none":
        y = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, DenseCache(x, pre, activation)


def dense_backward(p: DenseParams, cache: DenseCache, dy) -> np.ndarray:
    dy = np.asarray(dy, dtype=np.float64)
    if cache.activation == "relu":
        dy = dy * (cache.pre > 0)  # subgradient 0 at the kink
    x2 = cache.x.reshape(-1, p.w.shape[1])
    dy2 = dy.reshape(-1, p.w.shape[0])
    p.grads["w"] += dy2.T @ x2
    p.grads["b"] += dy2.sum(axis=0)
    return dy @ p.w


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict  # block name -> max relative error
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def table(self) -> str:
        width = max(len(n) for n in self.errors)
        lines = [f"{'block':<{width}}  max_rel_err  status"]
        for name, err in self.errors.items():
            lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < self.tol else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps components whose true gradient is (near) zero from
    turning finite-difference round-off into a huge ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(loss: Callable[[], float], param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every entry of ``param`` (perturbed in place)."""
    out = np.zeros_like(param)
    flat = param.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss()
        flat[i] = orig - step
        down = loss()
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing entry {i}")
        g[i] = (up - down) / (2.0 * step)
    return out


def grad_check(
    loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    tol: float = 1e-3,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grads()`` evaluates the loss at the current parameter values
    and returns it with the analytic gradient of every block in ``params``.
    The arrays in ``params`` are perturbed in place and restored.
    """
    loss0, analytic = loss_and_grads()
    if not math.isfinite(loss0):
        raise NumericError("loss is not finite at the starting point")
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}

    def loss_only() -> float:
        return float(loss_and_grads()[0])

    errors = {}
    for name, arr in params.items():
        errors[name] = relative_error(analytic[name], numerical_gradient(loss_only, arr, step))
    return GradCheckReport(errors, tol)
