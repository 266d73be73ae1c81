"""Group rating records: CSV ingestion, vocabularies, splits, imputation, synthetic data."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import GROUP_SIZE_FIELD, EncodedExample, Field, FieldSchema
from .tensor import SeededRng

UNK = "<UNK>"
GROUP_SIZE_BUCKETS = ("2", "3", "4", "5+")


class DataError(Exception):
    """Base class for dataset problems."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class DatasetError(DataError):
    pass


class EncodeError(DataError):
    pass


class SplitError(DataError):
    pass


# --------------------------------------------------------------------------
# schema declaration


@dataclass(frozen=True)
class SchemaDecl:
    """Maps CSV columns to roles. Contexts and criteria are ``(field name, column)`` pairs."""

    group: str = "GroupID"
    item: str = "Item"
    overall: str = "Rating"
    contexts: tuple = (("Class", "Class"), ("Semester", "Semester"), ("Lockdown", "Lockdown"))
    criteria: tuple = (("App", "App"), ("Data", "Data"), ("Ease", "Ease"))
    scale: tuple = (1.0, 5.0)
    members: str | None = None
    members_sep: str = ";"
    group_size: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(tuple(p) for p in self.contexts))
        object.__setattr__(self, "criteria", tuple(tuple(p) for p in self.criteria))
        lo, hi = (float(v) for v in self.scale)
        if not lo < hi:
            raise ValueError(f"rating scale must satisfy lo < hi, got {self.scale}")
        object.__setattr__(self, "scale", (lo, hi))
        names = ["group", "item"] + [n for n, _ in self.contexts] + [n for n, _ in self.criteria]
        if len(set(names)) != len(names) or GROUP_SIZE_FIELD in names[2:]:
            raise ValueError(f"field names must be unique and not reserved: {names}")

    @classmethod
    def generic(cls, contexts: Sequence[str], criteria: Sequence[str], scale=(1.0, 5.0)) -> "SchemaDecl":
        """Column names equal field names; used for synthetic files."""
        return cls(
            group="group_id", item="item_id", overall="overall",
            contexts=tuple((c, c) for c in contexts), criteria=tuple((c, c) for c in criteria),
            scale=scale, members="members", group_size="group_size",
        )

    @classmethod
    def parse(cls, text: str) -> "SchemaDecl":
        kw: dict = {"contexts": [], "criteria": []}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ValueError(f"schema declaration line {lineno}: expected key=value, got {raw!r}")
            if key.startswith("context."):
                kw["contexts"].append((key[len("context."):], value))
            elif key.startswith("criterion."):
                kw["criteria"].append((key[len("criterion."):], value))
            elif key == "scale":
                lo, _, hi = value.partition(",")
                kw["scale"] = (float(lo), float(hi))
            elif key == "members.sep":
                kw["members_sep"] = value
            elif key in ("group", "item", "overall", "members", "group_size"):
                kw[key] = value
            else:
                raise ValueError(f"schema declaration line {lineno}: unknown key {key!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SchemaDecl":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        lines = [f"group={self.group}", f"item={self.item}", f"overall={self.overall}"]
        lines += [f"context.{n}={c}" for n, c in self.contexts]
        lines += [f"criterion.{n}={c}" for n, c in self.criteria]
        lines.append(f"scale={_fmt_num(self.scale[0])},{_fmt_num(self.scale[1])}")
        if self.members:
            lines += [f"members={self.members}", f"members.sep={self.members_sep}"]
        if self.group_size:
            lines.append(f"group_size={self.group_size}")
        return "\n".join(lines) + "\n"

    @property
    def context_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.contexts)

    @property
    def criteria_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.criteria)

    def columns(self) -> list[str]:
        cols = [self.group, self.item] + [c for _, c in self.contexts] + [c for _, c in self.criteria]
        cols.append(self.overall)
        cols += [c for c in (self.members, self.group_size) if c]
        return cols


ITMREC_GROUP_DECL = SchemaDecl()


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class RatingRecord:
    group_id: str
    item_id: str
    contexts: Mapping[str, str]
    criteria: Mapping[str, int]
    overall: float
    members: tuple[str, ...] | None = None
    group_size: int | None = None

    def size(self) -> int | None:
        if self.group_size is not None:
            return self.group_size
        return len(self.members) if self.members else None


@dataclass(frozen=True)
class Dataset:
    records: tuple[RatingRecord, ...]
    scale: tuple[float, float] = (1.0, 5.0)
    decl: SchemaDecl = field(default=ITMREC_GROUP_DECL, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def context_names(self) -> tuple[str, ...]:
        return self.decl.context_names

    @property
    def criteria_names(self) -> tuple[str, ...]:
        return self.decl.criteria_names

    def subset(self, records: Iterable[RatingRecord]) -> "Dataset":
        return Dataset(tuple(records), self.scale, self.decl)

    def groups(self) -> list[str]:
        return list(dict.fromkeys(r.group_id for r in self.records))

    def items(self) -> list[str]:
        return list(dict.fromkeys(r.item_id for r in self.records))

    def targets(self) -> np.ndarray:
        return np.array([r.overall for r in self.records], dtype=np.float64)

    def rated_items(self, group_id: str) -> set[str]:
        return {r.item_id for r in self.records if r.group_id == group_id}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(repr((r.group_id, r.item_id, sorted(r.contexts.items()),
                           sorted(r.criteria.items()), r.overall)).encode("utf-8"))
        return h.hexdigest()[:16]

    def write_csv(self, path) -> None:
        d = self.decl
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(d.columns())
            for r in self.records:
                row = [r.group_id, r.item_id]
                row += [r.contexts[n] for n in d.context_names]
                row += [str(r.criteria[n]) for n in d.criteria_names]
                row.append(_fmt_num(r.overall))
                if d.members:
                    row.append(d.members_sep.join(r.members or ()))
                if d.group_size:
                    row.append("" if r.group_size is None else str(r.group_size))
                w.writerow(row)


def _rating(text: str, what: str, scale, row: int, integer: bool):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"{what} {text!r} is not numeric", row) from None
    if not math.isfinite(v):
        raise ParseError(f"{what} {text!r} is not finite", row)
    if integer:
        if not v.is_integer():
            raise ParseError(f"{what} {text!r} is not an integer level", row)
        v = int(v)
    if not scale[0] <= v <= scale[1]:
        raise ParseError(f"{what} {text!r} outside rating scale [{_fmt_num(scale[0])}, {_fmt_num(scale[1])}]", row)
    return v


def load_ratings_csv(path, decl: SchemaDecl | None = None) -> Dataset:
    """Parse a UTF-8 ratings CSV with a header row; rows are validated against ``decl.scale``."""
    decl = decl or ITMREC_GROUP_DECL
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise DatasetError(f"cannot open ratings file {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path} is empty")
        header = [h.strip() for h in header]
        col = {h: i for i, h in enumerate(header)}
        required = [decl.group, decl.item, decl.overall] + [c for _, c in decl.contexts] + [c for _, c in decl.criteria]
        missing = [c for c in required if c not in col]
        if missing:
            raise ParseError(f"missing column(s) {missing} in header {header}", 1)
        records = []
        for row in reader:
            n = reader.line_num
            if not any(cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", n)
            get = lambda c: row[col[c]].strip()  # noqa: E731
            contexts = {}
            for name, c in decl.contexts:
                if not get(c):
                    raise ParseError(f"empty context {name!r}", n)
                contexts[name] = get(c)
            criteria = {name: _rating(get(c), f"criterion {name!r}", decl.scale, n, True)
                        for name, c in decl.criteria}
            overall = float(_rating(get(decl.overall), "overall rating", decl.scale, n, False))
            members = None
            if decl.members and decl.members in col and get(decl.members):
                members = tuple(m.strip() for m in get(decl.members).split(decl.members_sep) if m.strip())
            size = None
            if decl.group_size and decl.group_size in col and get(decl.group_size):
                try:
                    size = int(get(decl.group_size))
                except ValueError:
                    raise ParseError(f"group size {get(decl.group_size)!r} is not an integer", n) from None
            if not get(decl.group) or not get(decl.item):
                raise ParseError("empty group or item id", n)
            records.append(RatingRecord(get(decl.group), get(decl.item), contexts, criteria, overall, members, size))
    if not records:
        raise DatasetError(f"{path} contains a header but no records")
    return Dataset(tuple(records), decl.scale, decl)


# --------------------------------------------------------------------------
# vocabularies and encoding


class Vocab:
    """Token <-> index map with ``UNK`` reserved at index 0."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = [UNK]
        self._index: dict[str, int] = {UNK: 0}
        for t in tokens:
            if t not in self._index:
                self._index[t] = len(self.tokens)
                self.tokens.append(t)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self._index and token != UNK

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def token(self, index: int) -> str:
        return self.tokens[index]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens


def group_size_bucket(size: int | None) -> str:
    if size is None:
        return UNK
    return "5+" if size >= 5 else str(size)


@dataclass
class Vocabularies:
    vocabs: dict  # field name -> Vocab, in schema order
    kinds: dict  # field name -> kind

    def __getitem__(self, name: str) -> Vocab:
        return self.vocabs[name]

    def schema(self) -> FieldSchema:
        return FieldSchema(tuple(Field(n, self.kinds[n], len(v)) for n, v in self.vocabs.items()))

    def to_json(self) -> str:
        return json.dumps({n: {"kind": self.kinds[n], "tokens": v.tokens[1:]} for n, v in self.vocabs.items()},
                          indent=1, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabularies":
        raw = json.loads(text)
        return cls({n: Vocab(e["tokens"]) for n, e in raw.items()}, {n: e["kind"] for n, e in raw.items()})


def build_vocabs(train: Dataset, schema: FieldSchema | None = None) -> Vocabularies:
    """Vocabularies from training rows only (first-occurrence order).

    Criteria use the fixed integer levels of the rating scale and the group
    size field uses fixed buckets. With ``schema`` given, only its fields
    are built.
    """
    if len(train) == 0:
        raise DatasetError("cannot build vocabularies from an empty dataset")
    lo, hi = train.scale
    levels = [str(v) for v in range(int(math.ceil(lo)), int(math.floor(hi)) + 1)]
    vocabs, kinds = {}, {}
    vocabs["group"], kinds["group"] = Vocab(r.group_id for r in train), "group"
    vocabs["item"], kinds["item"] = Vocab(r.item_id for r in train), "item"
    for name in train.context_names:
        vocabs[name], kinds[name] = Vocab(r.contexts[name] for r in train), "context"
    vocabs[GROUP_SIZE_FIELD], kinds[GROUP_SIZE_FIELD] = Vocab(GROUP_SIZE_BUCKETS), "context"
    for name in train.criteria_names:
        vocabs[name], kinds[name] = Vocab(levels), "criterion"
    if schema is not None:
        vocabs = {f.name: vocabs[f.name] for f in schema}
        kinds = {f.name: kinds[f.name] for f in schema}
    return Vocabularies(vocabs, kinds)


def _field_token(r: RatingRecord, f: Field) -> str:
    if f.kind == "group":
        return r.group_id
    if f.kind == "item":
        return r.item_id
    if f.name == GROUP_SIZE_FIELD:
        return group_size_bucket(r.size())
    if f.kind == "context":
        if f.name not in r.contexts:
            raise EncodeError(f"record ({r.group_id}, {r.item_id}) lacks context {f.name!r}")
        return r.contexts[f.name]
    if f.name not in r.criteria:
        raise EncodeError(f"record ({r.group_id}, {r.item_id}) lacks criterion {f.name!r}")
    return str(int(r.criteria[f.name]))


def encode_record(r: RatingRecord, vocabs: Vocabularies, schema: FieldSchema) -> EncodedExample:
    idx = []
    for f in schema:
        if f.name not in vocabs.vocabs:
            raise EncodeError(f"no vocabulary for field {f.name!r}")
        v = vocabs[f.name]
        if len(v) != f.vocab_size:
            raise EncodeError(f"field {f.name!r}: vocabulary has {len(v)} entries, schema says {f.vocab_size}")
        idx.append(v.index(_field_token(r, f)))
    return EncodedExample(tuple(idx), float(r.overall))


def encode_dataset(ds: Dataset, vocabs: Vocabularies, schema: FieldSchema) -> tuple[np.ndarray, np.ndarray]:
    """``(indices (N, F) int64, targets (N,))``."""
    rows = [encode_record(r, vocabs, schema) for r in ds]
    x = np.array([e.indices for e in rows], dtype=np.int64).reshape(len(rows), len(schema))
    return x, np.array([e.target for e in rows], dtype=np.float64)


# --------------------------------------------------------------------------
# splits and imputation


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous slices: ``floor, floor, remainder``."""
    f = [float(x) for x in fractions]
    if len(f) != 3 or any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(ds)
    n_train = int(math.floor(n * f[0]))
    n_val = int(math.floor(n * f[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f"split of {n} records gives sizes {(n_train, n_val, n_test)}; every part must be non-empty")
    order = SeededRng(seed).child("split").permutation(n)
    recs = [ds.records[i] for i in order]
    return (ds.subset(recs[:n_train]), ds.subset(recs[n_train:n_train + n_val]),
            ds.subset(recs[n_train + n_val:]))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def impute_criteria(train: Dataset, item_id: str) -> dict[str, int]:
    """Per-criterion rounded mean for ``item_id``; the global mean when the item is unseen."""
    if len(train) == 0:
        raise DatasetError("cannot impute from an empty dataset")
    rows = [r for r in train if r.item_id == item_id] or list(train)
    return {name: round_half_up(sum(r.criteria[name] for r in rows) / len(rows)) for name in train.criteria_names}


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_groups: int = 40
    n_items: int = 30
    n_records: int = 2000
    contexts: tuple = (("Class", 3), ("Semester", 2), ("Lockdown", 2))
    n_criteria: int = 3
    noise_std: float = 0.25
    seed: int = 0
    rule: str = "criteria_mean"
    scale: tuple = (1, 5)

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple((str(n), int(k)) for n, k in self.contexts))
        for name in ("n_groups", "n_items", "n_records", "n_criteria"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(k < 1 for _, k in self.contexts):
            raise ValueError("context cardinalities must be positive")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be non-negative")
        if self.rule not in ("criteria_mean", "context_shift"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "context_shift" and (not self.contexts or self.contexts[0][1] < 2):
            raise ValueError("context_shift needs a first context with at least two values")

    @property
    def criteria_names(self) -> tuple[str, ...]:
        if self.n_criteria == 3:
            return ("App", "Data", "Ease")
        return tuple(f"C{i + 1}" for i in range(self.n_criteria))


def synthetic_rating(criteria: Sequence[int], contexts: Mapping[str, str], cfg: SyntheticConfig, noise: float = 0.0) -> float:
    """The generating rule, exposed so tests can use it as an oracle."""
    raw = float(np.mean(criteria)) + noise
    if cfg.rule == "context_shift":
        name = cfg.contexts[0][0]
        raw += {f"{name}0": 1.0, f"{name}1": -1.0}.get(contexts[name], 0.0)
    lo, hi = cfg.scale
    return float(min(max(round_half_up(raw), lo), hi))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    rng = SeededRng(cfg.seed).child("synthetic")
    lo, hi = (int(v) for v in cfg.scale)
    n = cfg.n_records
    sizes = rng.integers(2, 6, cfg.n_groups)
    g = rng.integers(0, cfg.n_groups, n)
    it = rng.integers(0, cfg.n_items, n)
    ctx = {name: rng.integers(0, k, n) for name, k in cfg.contexts}
    crit = rng.integers(lo, hi + 1, (n, cfg.n_criteria))
    noise = rng.normal(0.0, 1.0, n) * cfg.noise_std
    records = []
    for j in range(n):
        contexts = {name: f"{name}{int(ctx[name][j])}" for name, _ in cfg.contexts}
        criteria = {name: int(crit[j, c]) for c, name in enumerate(cfg.criteria_names)}
        gid = int(g[j])
        members = tuple(f"u{gid}_{m}" for m in range(int(sizes[gid])))
        records.append(RatingRecord(
            f"g{gid}", f"i{int(it[j])}", contexts, criteria,
            synthetic_rating(crit[j], contexts, cfg, float(noise[j])),
            members, int(sizes[gid]),
        ))
    decl = SchemaDecl.generic([name for name, _ in cfg.contexts], cfg.criteria_names, cfg.scale)
    return Dataset(tuple(records), decl.scale, decl)


def worked_example() -> Dataset:
    """The four-group project-selection table used to illustrate the task."""
    rows = [
        ("g1", "File Management System", "DM", "Spring", "POS", (5, 5, 4), 5, ("u1", "u2", "u3")),
        ("g2", "Question Answering system", "DA", "Fall", "POS", (4, 4, 4), 3, ("u4", "u5")),
        ("g3", "Mushroom Classification", "DB", "Spring", "PRE", (3, 5, 4), 3, ("u6", "u7", "u8", "u9")),
        ("g4", "Zika Virus Epidemic", "DM", "Spring", "PRE", (2, 4, 5), 5, ("u10", "u11", "u12")),
    ]
    decl = SchemaDecl(members="Members", group_size="GroupSize")
    recs = [
        RatingRecord(g, i, {"Class": c1, "Semester": c2, "Lockdown": c3},
                     dict(zip(("App", "Data", "Ease"), cr)), float(r), m, len(m))
        for g, i, c1, c2, c3, cr, r, m in rows
    ]
    return Dataset(tuple(recs), decl.scale, decl)
