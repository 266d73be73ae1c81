"""
Training on synthetic group ratings
===================================

Generate a small ratings table, train the attention model on one
scenario and look at the learning curve and the test error.
"""
from grouprec import (
    Hyperparams,
    Scenario,
    SeededRng,
    SyntheticConfig,
    TrainConfig,
    build_model,
    build_vocabs,
    encode_dataset,
    evaluate,
    fit,
    generate_synthetic,
    scenario_schema,
    split,
)

# overall rating = rounded mean of the three criteria, plus a little noise
ds = generate_synthetic(SyntheticConfig(n_records=1500, noise_std=0.25, seed=0))
print(len(ds), "records,", len(ds.groups()), "groups,", len(ds.items()), "items")
r = ds.records[0]
print("first row:", r.group_id, r.item_id, dict(r.contexts), dict(r.criteria), "->", r.overall)

train, val, test = split(ds, (0.8, 0.1, 0.1), seed=0)

# vocabularies come from the training rows only; index 0 is the unknown token
vocabs = build_vocabs(train)
schema = scenario_schema(vocabs.schema(), Scenario.mcgrs_sc("Class"))
print(schema.describe())

model = build_model(schema, Hyperparams(), SeededRng(0))
hist = fit(model, encode_dataset(train, vocabs, schema), encode_dataset(val, vocabs, schema),
           TrainConfig(epochs=60, early_stop_patience=10))

for rec in hist.records[::10]:
    print(f"epoch {rec.epoch:3d}  train rmse {rec.train_rmse:.4f}  val rmse {rec.val_rmse:.4f}")
print("best epoch:", hist.best.epoch)

m = evaluate(model, test, vocabs)
print(f"test RMSE {m.rmse:.4f}  MAE {m.mae:.4f}  on {m.n} rows")
