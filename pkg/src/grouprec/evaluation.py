"""Error metrics, test-set evaluation, top-K group ranking and the scenario runner."""
from __future__ import annotations

import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .baseline import linear_baseline_fit
from .data import Dataset, EncodeError, Vocabularies, build_vocabs, encode_dataset, encode_record, impute_criteria, split
from .data import RatingRecord
from .layers import ConfigError
from .model import Hyperparams, Model, Scenario, build_model, scenario_schema
from .optim import TrainConfig, TrainHistory, fit, predict_batched
from .tensor import SeededRng


def _pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"preds and targets differ in length: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("metrics need at least one prediction")
    return p, t


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return math.sqrt(float(np.mean((t - p) ** 2)))


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(t - p)))


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    n: int

    @classmethod
    def of(cls, preds, targets) -> "Metrics":
        p, t = _pair(preds, targets)
        return cls(rmse(p, t), mae(p, t), int(p.size))


def evaluate(model: Model, test: Dataset, vocabs: Vocabularies, scenario: Scenario | None = None) -> Metrics:
    """Raw (unclamped) predictions on ``test`` using each record's true criteria."""
    schema = model.schema
    if scenario is not None:
        expected = scenario_schema(vocabs.schema(), scenario)
        if expected.names != schema.names:
            raise ConfigError(f"model fields {schema.names} do not match scenario {scenario.label} fields {expected.names}")
    x, y = encode_dataset(test, vocabs, schema)
    return Metrics.of(predict_batched(model, x), y)


# --------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RankedItem:
    item_id: str
    predicted: float  # clamped to the rating scale
    rank: int


@dataclass
class Ranking:
    items: list
    unknown_group: bool = False

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def ids(self) -> list[str]:
        return [r.item_id for r in self.items]


def candidate_items(history: Dataset, group_id: str, catalog: Sequence[str] | None = None) -> list[str]:
    """Catalog items the group has not interacted with, in catalog order."""
    seen = history.rated_items(group_id)
    return [i for i in (catalog if catalog is not None else history.items()) if i not in seen]


def rank_top_k(model: Model, group_id: str, candidate_items: Sequence[str], context: Mapping[str, str],
               k: int, train: Dataset, vocabs: Vocabularies) -> Ranking:
    """Top ``k`` unseen items for one group under ``context``.

    Criteria inputs are imputed per item from ``train``. Predictions are
    clamped to the rating scale; ties go to the lower item vocabulary index,
    then the lexically smaller id.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not candidate_items:
        raise ValueError("candidate set is empty")
    schema = model.schema
    known_ctx = set(train.context_names)
    for name in context:
        if name not in known_ctx:
            raise ConfigError(f"unknown context {name!r}; available: {sorted(known_ctx)}")
    rated = train.rated_items(group_id)
    clash = [i for i in candidate_items if i in rated]
    if clash:
        raise ValueError(f"candidates already rated by group {group_id!r}: {clash[:5]}")
    size = next((r.size() for r in train if r.group_id == group_id), None)
    rows = []
    for item in candidate_items:
        rec = RatingRecord(group_id, item, dict(context), impute_criteria(train, item), float("nan"), None, size)
        try:
            rows.append(encode_record(rec, vocabs, schema).indices)
        except EncodeError as exc:
            raise ConfigError(f"context incomplete for this model: {exc}") from None
    preds = np.clip(model.predict(np.array(rows, dtype=np.int64)), *train.scale)
    item_vocab = vocabs["item"]
    order = sorted(range(len(candidate_items)),
                   key=lambda j: (-preds[j], item_vocab.index(candidate_items[j]), candidate_items[j]))
    top = [RankedItem(candidate_items[j], float(preds[j]), pos + 1) for pos, j in enumerate(order[:k])]
    return Ranking(top, unknown_group=group_id not in vocabs["group"])


# --------------------------------------------------------------------------
# scenario runner


@dataclass
class RunResult:
    scenario: str
    seed: int
    metrics: Metrics
    baseline: Metrics
    epochs_ran: int
    history: TrainHistory = field(repr=False)
    split_fingerprint: str = ""


@dataclass
class ScenarioReport:
    runs: list  # RunResult, ordered by (scenario, seed)
    scenarios: list  # labels, in request order
    seeds: list

    def for_scenario(self, label: str) -> list:
        return [r for r in self.runs if r.scenario == label]

    def summary(self, label: str) -> dict:
        runs = self.for_scenario(label)

        def agg(vals):
            return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)

        out = {}
        for key, get in (("rmse", lambda r: r.metrics.rmse), ("mae", lambda r: r.metrics.mae),
                         ("baseline_rmse", lambda r: r.baseline.rmse), ("baseline_mae", lambda r: r.baseline.mae)):
            out[key] = agg([get(r) for r in runs])
        return out

    def mean_rmse(self, label: str) -> float:
        return self.summary(label)["rmse"][0]

    def to_csv(self) -> str:
        lines = ["scenario,seed,rmse,mae,epochs_ran,baseline_rmse,baseline_mae"]
        for r in self.runs:
            lines.append(f"{r.scenario},{r.seed},{r.metrics.rmse!r},{r.metrics.mae!r},{r.epochs_ran},"
                         f"{r.baseline.rmse!r},{r.baseline.mae!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Scenario columns with RMSE/MAE pairs, one row per model."""
        labels = self.scenarios
        w = max(14, *(len(s) + 2 for s in labels))
        head1 = f"{'Model':<10}|" + "|".join(f"{s:^{2 * w + 1}}" for s in labels)
        head2 = f"{'':<10}|" + "|".join(f"{'RMSE':^{w}}|{'MAE':^{w}}" for _ in labels)

        def row(name, rk, mk):
            cells = []
            for s in labels:
                sm = self.summary(s)
                for key in (rk, mk):
                    m, sd = sm[key]
                    cells.append(f"{m:.4f}±{sd:.4f}".center(w))
            return f"{name:<10}|" + "|".join(cells)

        return "\n".join([head1, head2, row("MHA", "rmse", "mae"),
                          row("Linear", "baseline_rmse", "baseline_mae"),
                          f"(mean ± sample std over seeds {self.seeds})"])


def run_one(full: Dataset, scenario: Scenario, hp: Hyperparams, cfg: TrainConfig, seed: int,
            fractions=(0.8, 0.1, 0.1), l2: float = 1.0) -> RunResult:
    """split -> vocabularies -> build -> fit -> evaluate for one (scenario, seed)."""
    train, val, test = split(full, fractions, seed)
    vocabs = build_vocabs(train)
    schema = scenario_schema(vocabs.schema(), scenario)
    model = build_model(schema, hp, SeededRng(seed).child("init"))
    tr = encode_dataset(train, vocabs, schema)
    va = encode_dataset(val, vocabs, schema)
    te = encode_dataset(test, vocabs, schema)
    run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
    hist = fit(model, tr, va, run_cfg)
    metrics = Metrics.of(predict_batched(model, te[0]), te[1])
    base = linear_baseline_fit(tr[0], tr[1], schema, l2, full.scale)
    return RunResult(scenario.label, seed, metrics, Metrics.of(base.predict(te[0]), te[1]),
                     len(hist), hist, test.fingerprint())


def _run_job(args):
    return run_one(*args)


def run_scenarios(full: Dataset, scenarios: Sequence[Scenario], hp: Hyperparams, cfg: TrainConfig,
                  seeds: Sequence[int], fractions=(0.8, 0.1, 0.1), jobs: int = 1, l2: float = 1.0) -> ScenarioReport:
    """Every scenario on the same seeded splits, so comparisons are paired."""
    if not seeds:
        raise ValueError("run_scenarios needs at least one seed")
    jobs_args = [(full, s, hp, cfg, seed, fractions, l2) for s in scenarios for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_run_job, jobs_args))
    else:
        runs = [_run_job(a) for a in jobs_args]
    return ScenarioReport(runs, [s.label for s in scenarios], list(seeds))


def default_scenarios(context_names: Sequence[str], single: str | None = None) -> list[Scenario]:
    """GRS, MCGRS, MCGRS_MC and MCGRS_SC (first context unless ``single`` is given)."""
    if not context_names:
        return [Scenario.grs(), Scenario.mcgrs()]
    return [Scenario.grs(), Scenario.mcgrs(), Scenario.mcgrs_mc(),
            Scenario.mcgrs_sc(single or context_names[0])]
