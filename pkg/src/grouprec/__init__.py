"""Group rating prediction from group, item, context and criteria fields.

Each input field becomes one embedding token; multi-head attention mixes the
tokens, layer norm standardises them, and a dense head regresses the
group's overall rating. Training is plain MSE with Adagrad, all in numpy
with hand-written backward passes.
"""
from .baseline import LinearBaseline, linear_baseline_fit, linear_baseline_predict
from .data import (
    Dataset,
    RatingRecord,
    SchemaDecl,
    SyntheticConfig,
    Vocabularies,
    build_vocabs,
    encode_dataset,
    encode_record,
    generate_synthetic,
    impute_criteria,
    load_ratings_csv,
    split,
)
from .evaluation import Metrics, ScenarioReport, evaluate, mae, rank_top_k, rmse, run_scenarios
from .layers import grad_check
from .model import (
    EncodedExample,
    Field,
    FieldSchema,
    Hyperparams,
    Model,
    Scenario,
    build_model,
    load_checkpoint,
    model_backward,
    model_forward,
    save_checkpoint,
    scenario_schema,
    zero_grads,
)
from .optim import AdagradState, TrainConfig, TrainHistory, adagrad_step, fit, mse_loss, train_epoch
from .tensor import SeededRng

__version__ = "0.1.0"

__all__ = [
    "AdagradState",
    "Dataset",
    "EncodedExample",
    "Field",
    "FieldSchema",
    "Hyperparams",
    "LinearBaseline",
    "Metrics",
    "Model",
    "RatingRecord",
    "Scenario",
    "ScenarioReport",
    "SchemaDecl",
    "SeededRng",
    "SyntheticConfig",
    "TrainConfig",
    "TrainHistory",
    "Vocabularies",
    "adagrad_step",
    "build_model",
    "build_vocabs",
    "encode_dataset",
    "encode_record",
    "evaluate",
    "fit",
    "generate_synthetic",
    "grad_check",
    "impute_criteria",
    "linear_baseline_fit",
    "linear_baseline_predict",
    "load_checkpoint",
    "load_ratings_csv",
    "mae",
    "model_backward",
    "model_forward",
    "mse_loss",
    "rank_top_k",
    "rmse",
    "run_scenarios",
    "save_checkpoint",
    "scenario_schema",
    "split",
    "train_epoch",
    "zero_grads",
]
