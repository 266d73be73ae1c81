"""
Recommending for a group, and checking the gradients
=====================================================
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
    fit,
    generate_synthetic,
    grad_check,
    mse_loss,
    rank_top_k,
    scenario_schema,
)
from grouprec.evaluation import candidate_items

ds = generate_synthetic(SyntheticConfig(n_records=800, n_items=40, seed=2))
vocabs = build_vocabs(ds)
schema = scenario_schema(vocabs.schema(), Scenario.mcgrs_sc("Class"))
model = build_model(schema, Hyperparams(), SeededRng(0))
xy = encode_dataset(ds, vocabs, schema)
fit(model, xy, xy, TrainConfig(epochs=30))

# items g3 has not rated yet; their criteria inputs are imputed from item means
cands = candidate_items(ds, "g3")
print(len(cands), "candidates for g3")
for ctx in ("Class0", "Class1"):
    top = rank_top_k(model, "g3", cands, {"Class": ctx}, 5, ds, vocabs)
    print(ctx, [(r.item_id, round(r.predicted, 3)) for r in top])

# central differences against the hand-written backward pass
x, y = xy[0][:4], xy[1][:4]


def loss_and_grads():
    model.zero_grads()
    pred, cache = model.forward(x)
    loss, dpred = mse_loss(pred, y)
    model.backward(cache, dpred)
    return loss, {k: g.copy() for k, (_, g) in model.parameters().items()}


small = {k: v for k, (v, _) in model.parameters().items() if v.size <= 2000}
report = grad_check(loss_and_grads, small)
print(report.table())
print("passed:", report.passed, " worst:", report.worst)
skipped = [k for k, (v, _) in model.parameters().items() if k not in small]
print("skipped (too large to probe element by element here):", skipped)
