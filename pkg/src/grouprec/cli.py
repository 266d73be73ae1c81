"""Command-line entry points: train, evaluate, recommend, gradcheck, synth.

Settings resolve as defaults < config file < flags. The config file is
line-oriented ``section.key=value`` text; its path comes from ``--config``
or the ``GROUPREC_CONFIG`` environment variable. Every command that writes
files writes them under one run directory, together with the resolved
config so the run can be repeated with ``--config <run>/config.txt``.

Exit codes: 0 ok, 1 config/usage, 2 data, 3 numeric or verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import re
import sys
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    SchemaDecl,
    SyntheticConfig,
    Vocabularies,
    build_vocabs,
    encode_dataset,
    generate_synthetic,
    load_ratings_csv,
    split,
)
from .evaluation import Metrics, candidate_items, default_scenarios, rank_top_k, run_scenarios
from .layers import ConfigError, grad_check
from .model import (
    CheckpointError,
    Field,
    FieldSchema,
    Hyperparams,
    Scenario,
    build_model,
    load_checkpoint,
    save_checkpoint,
    scenario_schema,
)
from .optim import TrainConfig, fit, mse_loss, predict_batched
from .tensor import NumericError, SeededRng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "GROUPREC_CONFIG"

DEFAULTS: dict = {
    "data.path": "",
    "data.schema": "",
    "data.test_fraction": 0.1,
    "scenario": "MCGRS_SC(Class)",
    "model.d": 16,
    "model.heads": 4,
    "model.d_h": 4,
    "model.dense_width": 64,
    "model.eps_layernorm": 1e-5,
    "model.scale_by": "head",
    "model.criteria_encoding": "categorical",
    "model.group_size_token": False,
    "train.epochs": 200,
    "train.batch_size": 32,
    "train.eta": 0.01,
    "train.eps": 1e-8,
    "train.patience": 20,
    "train.seed": 0,
    "train.validation_fraction": 0.1,
    "eval.seeds": "0,1,2,3,4",
    "eval.scenarios": "all",
    "eval.l2": 1.0,
    "run.out": "runs",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config resolution


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise CliError(f"config key {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise CliError(f"{origin}:{lineno}: expected key=value")
        if key not in DEFAULTS:
            raise CliError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def dump_config(cfg: dict) -> str:
    return "".join(f"{k}={_fmt(cfg[k])}\n" for k in sorted(cfg))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot read config file {path}: {exc}") from None
        cfg.update(parse_config_text(text, str(path)))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in DEFAULTS:
            raise CliError(f"--set expects a known key=value, got {item!r}")
        cfg[key.strip()] = _coerce(key.strip(), value)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = _coerce(key, v)
    return cfg


_FLAG_KEYS = {
    "data": "data.path",
    "schema": "data.schema",
    "scenario": "scenario",
    "seed": "train.seed",
    "epochs": "train.epochs",
    "out": "run.out",
    "seeds": "eval.seeds",
    "scenarios": "eval.scenarios",
}


def hyperparams(cfg: dict) -> Hyperparams:
    try:
        return Hyperparams(cfg["model.d"], cfg["model.heads"], cfg["model.d_h"], cfg["model.dense_width"],
                           cfg["model.eps_layernorm"], cfg["train.seed"], cfg["model.scale_by"],
                           cfg["model.criteria_encoding"])
    except ConfigError as exc:
        raise CliError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(cfg["train.epochs"], cfg["train.batch_size"], cfg["train.eta"], cfg["train.eps"],
                           cfg["train.patience"], cfg["train.seed"], cfg["train.validation_fraction"])
    except ValueError as exc:
        raise CliError(str(exc)) from None


def fractions(cfg: dict) -> tuple[float, float, float]:
    val, test = cfg["train.validation_fraction"], cfg["data.test_fraction"]
    if not (0 < val < 1 and 0 < test < 1 and val + test < 1):
        raise CliError("validation and test fractions must be positive and sum below 1")
    return (1.0 - val - test, val, test)


def scenario(cfg: dict, text: str | None = None) -> Scenario:
    try:
        s = Scenario.parse(text or cfg["scenario"])
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    if cfg["model.group_size_token"]:
        s = Scenario(s.tag, s.contexts, s.criteria_active, True)
    return s


def load_decl(cfg: dict) -> SchemaDecl:
    path = cfg["data.schema"]
    if not path and cfg["data.path"]:
        sidecar = Path(cfg["data.path"] + ".schema")
        if sidecar.exists():
            path = str(sidecar)
    if not path:
        return SchemaDecl()
    try:
        return SchemaDecl.load(path)
    except OSError as exc:
        raise CliError(f"cannot read schema declaration {path}: {exc}") from None
    except ValueError as exc:
        raise CliError(f"schema declaration {path}: {exc}") from None


def load_data(cfg: dict):
    if not cfg["data.path"]:
        raise CliError("no data file given (use --data or data.path=...)")
    path = Path(cfg["data.path"])
    if not path.exists():
        raise CliError(f"data file not found: {path}", EXIT_DATA)
    try:
        return load_ratings_csv(path, load_decl(cfg))
    except DataError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None


def run_dir(cfg: dict, command: str, explicit: str | None, label: str) -> Path:
    if explicit:
        d = Path(explicit)
    else:
        stamp = hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:10]
        slug = re.sub(r"[^A-Za-z0-9]+", "-", label).strip("-")
        d = Path(cfg["run.out"]) / f"{command}-{slug}-{stamp}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    hp, tcfg, fr, sc = hyperparams(cfg), train_config(cfg), fractions(cfg), scenario(cfg)
    ds = load_data(cfg)
    try:
        train, val, _ = split(ds, fr, cfg["train.seed"])
    except DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    vocabs = build_vocabs(train)
    try:
        schema = scenario_schema(vocabs.schema(), sc)
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    model = build_model(schema, hp, SeededRng(cfg["train.seed"]).child("init"))
    hist = fit(model, encode_dataset(train, vocabs, schema), encode_dataset(val, vocabs, schema), tcfg)
    out = run_dir(cfg, "train", args.run_dir, sc.label)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    (out / "metrics.csv").write_text(hist.to_csv(), encoding="utf-8")
    (out / "vocabs.json").write_text(vocabs.to_json(), encoding="utf-8")
    save_checkpoint(model, out / "model.ckpt")
    best = hist.best
    print(f"run_dir={out}")
    print(f"epochs_ran={len(hist)} best_epoch={best.epoch} val_rmse={best.val_rmse!r} val_mse={best.val_mse!r}")
    return EXIT_OK


def _load_run(run: Path):
    if not (run / "model.ckpt").exists():
        raise CliError(f"no checkpoint in {run}")
    try:
        model = load_checkpoint(run / "model.ckpt")
        vocabs = Vocabularies.from_json((run / "vocabs.json").read_text(encoding="utf-8"))
        saved = parse_config_text((run / "config.txt").read_text(encoding="utf-8"), str(run / "config.txt"))
    except (CheckpointError, OSError, ValueError) as exc:
        raise CliError(f"cannot load run {run}: {exc}") from None
    return model, vocabs, saved


def cmd_evaluate(args) -> int:
    if args.run_dir and not args.scenarios:
        return _evaluate_checkpoint(args)
    cfg = resolve_config(args)
    ds = load_data(cfg)
    hp, tcfg, fr = hyperparams(cfg), train_config(cfg), fractions(cfg)
    try:
        seeds = [int(s) for s in str(cfg["eval.seeds"]).split(",") if s.strip()]
    except ValueError:
        raise CliError(f"bad seed list {cfg['eval.seeds']!r}") from None
    wanted = cfg["eval.scenarios"].strip()
    if wanted.lower() == "all":
        single = "Class" if "Class" in ds.context_names else None
        scenarios = default_scenarios(ds.context_names, single)
    else:
        scenarios = [scenario(cfg, s) for s in re.split(r",(?![^(]*\))", wanted) if s.strip()]
    if cfg["model.group_size_token"]:
        scenarios = [Scenario(s.tag, s.contexts, s.criteria_active, True) for s in scenarios]
    try:
        report = run_scenarios(ds, scenarios, hp, tcfg, seeds, fr, jobs=args.jobs, l2=cfg["eval.l2"])
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    except DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    out = run_dir(cfg, "evaluate", None, "scenarios")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    (out / "results.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "table.txt").write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    print(f"run_dir={out}")
    return EXIT_OK


def _evaluate_checkpoint(args) -> int:
    run = Path(args.run_dir)
    model, vocabs, saved = _load_run(run)
    if args.data:
        saved["data.path"] = args.data
    if args.scenario:
        want = scenario(saved, args.scenario)
        try:
            expected = scenario_schema(vocabs.schema(), want)
        except ConfigError as exc:
            raise CliError(str(exc)) from None
        if expected.names != model.schema.names:
            raise CliError(f"schema mismatch: checkpoint fields {list(model.schema.names)} "
                           f"but scenario {want.label} needs {list(expected.names)}")
    ds = load_data(saved)
    parts = dict(zip(("train", "val", "test"), split(ds, fractions(saved), saved["train.seed"])))
    x, y = encode_dataset(parts[args.split], vocabs, model.schema)
    m = Metrics.of(predict_batched(model, x), y)
    print(f"split={args.split} n={m.n} rmse={m.rmse!r} mae={m.mae!r} mse={m.rmse ** 2!r}")
    return EXIT_OK


def cmd_recommend(args) -> int:
    run = Path(args.run_dir)
    model, vocabs, saved = _load_run(run)
    if args.data:
        saved["data.path"] = args.data
    history = load_data(saved)
    context = {}
    for item in args.context or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--context expects Name=value, got {item!r}")
        if key not in history.context_names:
            raise CliError(f"unknown context {key!r}; available: {list(history.context_names)}")
        context[key] = value
    needed = [f.name for f in model.schema if f.kind == "context" and f.name in history.context_names]
    missing = [n for n in needed if n not in context]
    if missing:
        raise CliError(f"model needs context value(s) for {missing}")
    cands = candidate_items(history, args.group)
    if not cands:
        print(f"no candidates: group {args.group!r} has rated every item in the catalog")
        return EXIT_OK
    try:
        ranking = rank_top_k(model, args.group, cands, context, args.k, history, vocabs)
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    if ranking.unknown_group:
        _say(f"warning: group {args.group!r} was not seen in training; using the unknown-group embedding")
    if args.format == "csv":
        print("rank,item_id,predicted_rating")
        for r in ranking:
            print(f"{r.rank},{_csv_cell(r.item_id)},{r.predicted!r}")
    else:
        width = max(len(r.item_id) for r in ranking)
        for r in ranking:
            print(f"{r.rank:>3}  {r.item_id:<{width}}  {r.predicted:.4f}")
    return EXIT_OK


def _csv_cell(s: str) -> str:
    return '"' + s.replace('"', '""') + '"' if any(c in s for c in ',"\n') else s


def gradcheck_model(d=8, heads=2, dense_width=16, seed=0):
    """Random six-field model and one encoded example for gradient verification."""
    schema = FieldSchema((
        Field("group", "group", 7), Field("item", "item", 9),
        Field("Class", "context", 3), Field("Semester", "context", 4),
        Field("App", "criterion", 6), Field("Data", "criterion", 6),
    ))
    if heads < 1 or d % heads:
        raise CliError(f"d={d} must be divisible by heads={heads}")
    hp = Hyperparams(d=d, heads=heads, d_h=d // heads, dense_width=dense_width, seed=seed)
    rng = SeededRng(seed)
    model = build_model(schema, hp, rng.child("init"))
    # push embeddings away from the tiny init so attention is non-uniform
    for t in model.tables.values():
        t.weights[...] = rng.child("emb", t.name).uniform(-1.0, 1.0, t.weights.shape)
    ex = np.array([rng.child("ex", f.name).integers(0, f.vocab_size) for f in schema], dtype=np.int64)
    return model, ex, 3.5


def cmd_gradcheck(args) -> int:
    model, ex, target = gradcheck_model(args.d, args.heads, args.dense_width, args.seed)
    params = {k: v for k, (v, _) in model.parameters().items()}
    grads = {k: g for k, (_, g) in model.parameters().items()}

    def loss_and_grads():
        model.zero_grads()
        pred, cache = model.forward(ex)
        loss, dpred = mse_loss([pred], [target])
        model.backward(cache, dpred[0])
        out = {k: g.copy() for k, g in grads.items()}
        if args.corrupt:
            out["dense.w"] += 0.1
        return loss, out

    try:
        report = grad_check(loss_and_grads, params, tol=args.tol, step=args.step)
    except NumericError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    print(report.table())
    if report.passed:
        print(f"gradcheck passed: all blocks below {args.tol:g}")
        return EXIT_OK
    name, err = report.worst
    _say(f"gradcheck FAILED: block {name} has max relative error {err:.3e} >= {args.tol:g}")
    return EXIT_NUMERIC


def cmd_synth(args) -> int:
    try:
        contexts = []
        for part in (args.contexts or "").split(","):
            if part.strip():
                name, _, k = part.partition("=")
                contexts.append((name.strip(), int(k)))
        cfg = SyntheticConfig(args.n_groups, args.n_items, args.n_records, tuple(contexts), args.n_criteria,
                              args.noise_std, args.seed, args.rule)
    except ValueError as exc:
        raise CliError(f"invalid synthetic config: {exc}") from None
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.write_csv(out)
    Path(str(out) + ".schema").write_text(ds.decl.dumps(), encoding="utf-8")
    print(f"wrote {len(ds)} records to {out} (schema declaration {out}.schema)")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--data", help="ratings CSV")
    p.add_argument("--schema", help="column schema declaration (default: <data>.schema or the ITM-Rec layout)")
    p.add_argument("--out", help="base output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grouprec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write checkpoint + per-epoch metrics")
    _common(p)
    p.add_argument("--scenario", help="GRS, MCGRS, MCGRS_MC or MCGRS_SC(<context>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--run-dir", help="write outputs here instead of a stamped directory under --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run, or run the four-scenario comparison")
    _common(p)
    p.add_argument("--run-dir", help="checkpoint mode: directory written by `train`")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--scenario", help="checkpoint mode: verify the checkpoint matches this scenario")
    p.add_argument("--scenarios", help="scenario mode: 'all' or a comma list")
    p.add_argument("--seeds", help="scenario mode: comma-separated seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-K unseen items for a group")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="interaction history (default: the run's training data file)")
    p.add_argument("--group", required=True)
    p.add_argument("--context", action="append", metavar="NAME=VALUE")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dense-width", type=int, default=16)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic ratings CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n-groups", type=int, default=40)
    p.add_argument("--n-items", type=int, default=30)
    p.add_argument("--n-records", type=int, default=2000)
    p.add_argument("--contexts", default="Class=3,Semester=2,Lockdown=2")
    p.add_argument("--n-criteria", type=int, default=3)
    p.add_argument("--noise-std", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rule", choices=("criteria_mean", "context_shift"), default="criteria_mean")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        _say(f"error: {exc}")
        return exc.code
    except (NumericError, FloatingPointError) as exc:
        _say(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except DataError as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA
    except (ConfigError, CheckpointError) as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
