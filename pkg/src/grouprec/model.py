"""Field schema, scenarios and the end-to-end rating model.

Pipeline for one example (``F`` active fields, embedding width ``d``)::

    field indices -> embedding rows stacked as an F x d token matrix
                  -> multi-head attention across tokens
                  -> layer norm per token
                  -> flatten (field order, row-major) to F*d
                  -> dense + ReLU -> linear scalar rating

Batches carry one extra leading axis throughout.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import (
    ConfigError,
    DenseParams,
    EmbeddingTable,
    FieldLookupError,
    MhaParams,
    dense_backward,
    dense_forward,
    layernorm_backward,
    layernorm_forward,
    mha_backward,
    mha_forward,
)
from .tensor import SeededRng, ShapeError

KINDS = ("group", "item", "context", "criterion")
SCENARIO_TAGS = ("GRS", "MCGRS", "MCGRS_MC", "MCGRS_SC")
GROUP_SIZE_FIELD = "group_size"


# --------------------------------------------------------------------------
# schema and scenarios


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    vocab_size: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.vocab_size < 1:
            raise ConfigError(f"field {self.name!r}: vocab_size must be positive")


@dataclass(frozen=True)
class FieldSchema:
    """Ordered input fields; the order fixes the flattened layout."""

    fields: tuple[Field, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        kinds = [f.kind for f in self.fields]
        if kinds.count("group") != 1 or kinds.count("item") != 1:
            raise ConfigError("schema needs exactly one group field and one item field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in {names}")

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def of_kind(self, kind: str) -> tuple[Field, ...]:
        return tuple(f for f in self.fields if f.kind == kind)

    def __getitem__(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def describe(self) -> str:
        return "\n".join(f"{i}\t{f.name}\t{f.kind}\t{f.vocab_size}" for i, f in enumerate(self.fields))


@dataclass(frozen=True)
class Scenario:
    """One experimental configuration of active inputs.

    ``contexts`` is ignored for GRS/MCGRS, means "all contexts" for
    MCGRS_MC when empty, and must name exactly one context for MCGRS_SC.
    """

    tag: str
    contexts: tuple[str, ...] = ()
    criteria_active: bool = False
    group_size_token: bool = False

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(self.contexts))
        if self.tag not in SCENARIO_TAGS:
            raise ConfigError(f"unknown scenario {self.tag!r}; expected one of {SCENARIO_TAGS}")
        if self.tag == "GRS" and (self.contexts or self.criteria_active):
            raise ConfigError("GRS uses neither contexts nor criteria")
        if self.tag == "MCGRS" and (self.contexts or not self.criteria_active):
            raise ConfigError("MCGRS uses criteria and no contexts")
        if self.tag in ("MCGRS_MC", "MCGRS_SC") and not self.criteria_active:
            raise ConfigError(f"{self.tag} requires criteria")
        if self.tag == "MCGRS_SC" and len(self.contexts) != 1:
            raise ConfigError("MCGRS_SC takes exactly one context")

    @classmethod
    def grs(cls, **kw) -> "Scenario":
        return cls("GRS", **kw)

    @classmethod
    def mcgrs(cls, **kw) -> "Scenario":
        return cls("MCGRS", criteria_active=True, **kw)

    @classmethod
    def mcgrs_mc(cls, contexts: Sequence[str] = (), **kw) -> "Scenario":
        return cls("MCGRS_MC", tuple(contexts), criteria_active=True, **kw)

    @classmethod
    def mcgrs_sc(cls, context: str, **kw) -> "Scenario":
        return cls("MCGRS_SC", (context,), criteria_active=True, **kw)

    @property
    def label(self) -> str:
        if self.tag == "MCGRS_SC" or (self.tag == "MCGRS_MC" and self.contexts):
            return f"{self.tag}({'+'.join(self.contexts)})"
        return self.tag

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        """Inverse of ``label``: ``GRS``, ``MCGRS``, ``MCGRS_MC``, ``MCGRS_SC(Class)``."""
        text = text.strip()
        tag, _, rest = text.partition("(")
        tag = tag.strip().upper()
        contexts = tuple(c.strip() for c in rest.rstrip(")").split("+") if c.strip()) if rest else ()
        if tag == "GRS":
            return cls.grs()
        if tag == "MCGRS":
            return cls.mcgrs()
        if tag == "MCGRS_MC":
            return cls.mcgrs_mc(contexts)
        if tag == "MCGRS_SC":
            if len(contexts) != 1:
                raise ConfigError(f"scenario {text!r}: MCGRS_SC needs one context, e.g. MCGRS_SC(Class)")
            return cls.mcgrs_sc(contexts[0])
        raise ConfigError(f"unknown scenario {text!r}")


def scenario_schema(full: FieldSchema, s: Scenario) -> FieldSchema:
    """Restrict ``full`` to the fields active under ``s``, preserving order."""
    contexts = [f for f in full.of_kind("context") if f.name != GROUP_SIZE_FIELD]
    known = {f.name for f in contexts}
    for name in s.contexts:
        if name not in known:
            raise ConfigError(f"unknown context {name!r}; available: {sorted(known)}")
    if s.tag in ("GRS", "MCGRS"):
        wanted = set()
    elif s.tag == "MCGRS_MC" and not s.contexts:
        wanted = known
    else:
        wanted = set(s.contexts)
    if s.group_size_token and GROUP_SIZE_FIELD not in full.names:
        raise ConfigError("group-size token requested but the schema has no group_size field")
    keep = []
    for f in full:
        if f.kind in ("group", "item"):
            keep.append(f)
        elif f.kind == "context" and (f.name in wanted or (f.name == GROUP_SIZE_FIELD and s.group_size_token)):
            keep.append(f)
        elif f.kind == "criterion" and s.criteria_active:
            keep.append(f)
    return FieldSchema(tuple(keep))


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Hyperparams:
    d: int = 16
    heads: int = 4
    d_h: int = 4
    dense_width: int = 64
    eps_layernorm: float = 1e-5
    seed: int = 0
    scale_by: str = "head"
    criteria_encoding: str = "categorical"

    def __post_init__(self):
        for name in ("d", "heads", "d_h", "dense_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.heads * self.d_h != self.d:
            raise ConfigError(f"heads * d_h must equal d, got {self.heads} * {self.d_h} != {self.d}")
        if not self.eps_layernorm > 0:
            raise ConfigError("eps_layernorm must be positive")
        if self.scale_by not in ("head", "model"):
            raise ConfigError("scale_by must be 'head' or 'model'")
        if self.criteria_encoding not in ("categorical", "ordinal"):
            raise ConfigError("criteria_encoding must be 'categorical' or 'ordinal'")

    @classmethod
    def with_heads(cls, d: int = 16, heads: int = 4, **kw) -> "Hyperparams":
        """Derive ``d_h = d / heads``; rejects non-divisible combinations."""
        if heads < 1 or d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        return cls(d=d, heads=heads, d_h=d // heads, **kw)


@dataclass
class EncodedExample:
    indices: tuple[int, ...]
    target: float = float("nan")


@dataclass
class ModelCache:
    indices: np.ndarray
    ordinal_t: dict
    mha: object
    ln: object
    hidden: object
    out: object


class Model:
    """All trainable parameters plus forward and reverse passes."""

    def __init__(self, schema: FieldSchema, hp: Hyperparams, tables, mha: MhaParams,
                 hidden: DenseParams, out: DenseParams):
        self.schema = schema
        self.hp = hp
        self.tables: "OrderedDict[str, EmbeddingTable]" = tables
        self.mha = mha
        self.hidden = hidden
        self.out = out
        n_in = len(schema) * hp.d
        if hidden.w.shape != (hp.dense_width, n_in):
            raise ConfigError(f"hidden layer must be {(hp.dense_width, n_in)}, got {hidden.w.shape}")
        if out.w.shape != (1, hp.dense_width):
            raise ConfigError(f"output layer must be {(1, hp.dense_width)}, got {out.w.shape}")

    # ---- parameter access

    def parameters(self) -> "OrderedDict[str, tuple[np.ndarray, np.ndarray]]":
        """``name -> (value, grad)`` in declaration order."""
        ps = OrderedDict()
        for name, t in self.tables.items():
            ps[f"emb.{name}"] = (t.weights, t.grads)
        for k, v in self.mha.params().items():
            ps[f"mha.{k}"] = (v, self.mha.grads[k])
        for prefix, layer in (("dense", self.hidden), ("out", self.out)):
            for k, v in layer.params().items():
                ps[f"{prefix}.{k}"] = (v, layer.grads[k])
        return ps

    def zero_grads(self) -> None:
        for _, g in self.parameters().values():
            g.fill(0.0)

    def snapshot(self) -> dict:
        return {k: v.copy() for k, (v, _) in self.parameters().items()}

    def restore(self, snap: dict) -> None:
        for k, (v, _) in self.parameters().items():
            v[...] = snap[k]

    def is_ordinal(self, f: Field) -> bool:
        return f.kind == "criterion" and self.hp.criteria_encoding == "ordinal"

    # ---- forward / backward

    def _ordinal_position(self, f: Field, idx: np.ndarray) -> np.ndarray:
        # index 0 is UNK, levels occupy 1..n; UNK sits mid-scale
        n = f.vocab_size - 1
        t = (idx - 1) / max(n - 1, 1)
        return np.where(idx == 0, 0.5, t).astype(np.float64)

    def embed(self, indices: np.ndarray):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape[-1] != len(self.schema):
            raise ShapeError(f"expected {len(self.schema)} field indices, got shape {indices.shape}")
        tokens, ord_t = [], {}
        for j, f in enumerate(self.schema):
            idx = indices[..., j]
            table = self.tables[f.name]
            if self.is_ordinal(f):
                if idx.size and (idx.min() < 0 or idx.max() >= f.vocab_size):
                    raise FieldLookupError(f"field {f.name!r}: index out of range for {f.vocab_size} levels")
                t = self._ordinal_position(f, idx)[..., None]
                rows = table.lookup([0, 1])
                tokens.append((1.0 - t) * rows[0] + t * rows[1])
                ord_t[f.name] = t
            else:
                tokens.append(table.lookup(idx))
        return np.stack(tokens, axis=-2), ord_t

    def forward(self, indices) -> tuple[np.ndarray, ModelCache]:
        indices = np.asarray(indices, dtype=np.int64)
        x, ord_t = self.embed(indices)
        z, c_mha = mha_forward(self.mha, x)
        zl, c_ln = layernorm_forward(z, self.hp.eps_layernorm)
        flat = zl.reshape(zl.shape[:-2] + (-1,))
        hdn, c_hid = dense_forward(self.hidden, flat, "relu")
        r, c_out = dense_forward(self.out, hdn, "none")
        return r[..., 0], ModelCache(indices, ord_t, c_mha, c_ln, c_hid, c_out)

    def backward(self, cache: ModelCache, dpred) -> None:
        dpred = np.asarray(dpred, dtype=np.float64)
        dh = dense_backward(self.out, cache.out, dpred[..., None])
        dflat = dense_backward(self.hidden, cache.hidden, dh)
        dzl = dflat.reshape(dflat.shape[:-1] + (len(self.schema), self.hp.d))
        dz = layernorm_backward(cache.ln, dzl)
        dx = mha_backward(self.mha, cache.mha, dz)
        for j, f in enumerate(self.schema):
            table = self.tables[f.name]
            up = dx[..., j, :]
            if self.is_ordinal(f):
                t = cache.ordinal_t[f.name]
                table.grads[0] += ((1.0 - t) * up).reshape(-1, self.hp.d).sum(axis=0)
                table.grads[1] += (t * up).reshape(-1, self.hp.d).sum(axis=0)
            else:
                table.backward(cache.indices[..., j], up)

    def predict(self, indices) -> np.ndarray:
        return self.forward(indices)[0]

    def lookup_counts(self) -> dict:
        return {name: t.lookups for name, t in self.tables.items()}


def build_model(schema: FieldSchema, hp: Hyperparams, rng: SeededRng | None = None) -> Model:
    """Initialise every parameter block deterministically from ``rng`` (default: ``hp.seed``)."""
    if rng is None:
        rng = SeededRng(hp.seed)
    tables = OrderedDict()
    for f in schema:
        rows = 2 if (f.kind == "criterion" and hp.criteria_encoding == "ordinal") else f.vocab_size
        tables[f.name] = EmbeddingTable.init(f.name, rows, hp.d, rng.child("emb", f.name))
    mha = MhaParams.init(hp.d, hp.heads, hp.d_h, rng.child("mha"), hp.scale_by)
    hidden = DenseParams.init(len(schema) * hp.d, hp.dense_width, rng.child("dense"))
    out = DenseParams.init(hp.dense_width, 1, rng.child("out"))
    return Model(schema, hp, tables, mha, hidden, out)


def _as_indices(ex) -> np.ndarray:
    return np.asarray(ex.indices if isinstance(ex, EncodedExample) else ex, dtype=np.int64)


def model_forward(m: Model, ex) -> tuple[float, ModelCache]:
    pred, cache = m.forward(_as_indices(ex))
    return (float(pred) if np.ndim(pred) == 0 else pred), cache


def model_backward(m: Model, cache: ModelCache, dloss_dpred) -> None:
    m.backward(cache, dloss_dpred)


def zero_grads(m: Model) -> None:
    m.zero_grads()


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic[8] version:u32
#   n_fields:u32 { name:str kind:str vocab:u32 }*
#   d:u32 heads:u32 d_h:u32 dense_width:u32 eps:f64 seed:i64 scale_by:str criteria_encoding:str
#   n_blocks:u32 { name:str ndim:u32 dims:u32* data:f64* }*
# where str = len:u32 utf8[len]

MAGIC = b"GRPREC\x00\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 in checkpoint header: {exc}") from None


def checkpoint_bytes(m: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(m.schema)))
    for f in m.schema:
        _put_str(buf, f.name)
        _put_str(buf, f.kind)
        buf.write(struct.pack("<I", f.vocab_size))
    hp = m.hp
    buf.write(struct.pack("<IIIIdq", hp.d, hp.heads, hp.d_h, hp.dense_width, hp.eps_layernorm, hp.seed))
    _put_str(buf, hp.scale_by)
    _put_str(buf, hp.criteria_encoding)
    params = m.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, (v, _) in params.items():
        _put_str(buf, name)
        buf.write(struct.pack("<I", v.ndim))
        buf.write(struct.pack(f"<{v.ndim}I", *v.shape))
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version > CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"
        )
    if version < 1:
        raise CheckpointError(f"invalid checkpoint version {version}")
    try:
        (n_fields,) = r.unpack("<I")
        flds = []
        for _ in range(n_fields):
            name, kind = r.string(), r.string()
            (vocab,) = r.unpack("<I")
            flds.append(Field(name, kind, vocab))
        d, heads, d_h, width, eps, seed = r.unpack("<IIIIdq")
        hp = Hyperparams(d, heads, d_h, width, eps, seed, r.string(), r.string())
        m = build_model(FieldSchema(tuple(flds)), hp, SeededRng(0))
        params = m.parameters()
        (n_blocks,) = r.unpack("<I")
        if n_blocks != len(params):
            raise CheckpointError(f"checkpoint has {n_blocks} parameter blocks, model expects {len(params)}")
        for expected in params:
            name = r.string()
            if name != expected:
                raise CheckpointError(f"parameter block {name!r} found where {expected!r} was expected")
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I")
            v = params[name][0]
            if tuple(shape) != v.shape:
                raise CheckpointError(f"block {name!r} has shape {shape}, model expects {v.shape}")
            v[...] = np.frombuffer(r.take(8 * v.size), dtype="<f8").reshape(v.shape)
    except ConfigError as exc:
        raise CheckpointError(f"inconsistent checkpoint header: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last parameter block")
    return m


def save_checkpoint(m: Model, path) -> Path:
    """Write the binary checkpoint plus a ``.schema.txt`` sidecar for humans."""
    path = Path(path)
    path.write_bytes(checkpoint_bytes(m))
    lines = [f"checkpoint_version={CHECKPOINT_VERSION}"]
    lines += [f"hp.{f.name}={getattr(m.hp, f.name)}" for f in fields(m.hp)]
    lines.append("# index\tname\tkind\tvocab_size")
    lines.append(m.schema.describe())
    Path(str(path) + ".schema.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_bytes(data)


def same_parameters(a: Model, b: Model) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return list(pa) == list(pb) and all(np.array_equal(pa[k][0], pb[k][0]) for k in pa)


__all__ = [
    "Field", "FieldSchema", "Scenario", "scenario_schema", "Hyperparams", "EncodedExample", "Model",
    "build_model", "model_forward", "model_backward", "zero_grads", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "UnsupportedVersionError", "GROUP_SIZE_FIELD",
]
