import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouprec.data import (
    UNK,
    Dataset,
    DatasetError,
    EncodeError,
    ParseError,
    SchemaDecl,
    SplitError,
    SyntheticConfig,
    Vocabularies,
    build_vocabs,
    encode_dataset,
    encode_record,
    generate_synthetic,
    group_size_bucket,
    impute_criteria,
    load_ratings_csv,
    round_half_up,
    split,
    synthetic_rating,
    worked_example,
)
from grouprec.model import Scenario, scenario_schema

HEADER = "GroupID,Item,Class,Semester,Lockdown,App,Data,Ease,Rating\n"
WORKED_CSV = HEADER + (
    "g1,File Management System,DM,Spring,POS,5,5,4,5\n"
    "g2,Question Answering system,DA,Fall,POS,4,4,4,3\n"
    "g3,Mushroom Classification,DB,Spring,PRE,3,5,4,3\n"
    "g4,Zika Virus Epidemic,DM,Spring,PRE,2,4,5,5\n"
)


def write(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_worked_example(tmp_path):
    ds = load_ratings_csv(write(tmp_path, WORKED_CSV))
    assert len(ds) == 4
    g1 = ds.records[0]
    assert (g1.criteria["App"], g1.criteria["Data"], g1.criteria["Ease"]) == (5, 5, 4)
    assert g1.overall == 5.0
    assert g1.contexts == {"Class": "DM", "Semester": "Spring", "Lockdown": "POS"}
    assert ds.fingerprint() == Dataset(worked_example().records).fingerprint()


def test_out_of_scale_rating_names_row(tmp_path):
    bad = WORKED_CSV.replace("DA,Fall,POS,4,4,4,3", "DA,Fall,POS,4,4,4,6")
    with pytest.raises(ParseError, match="row 3") as exc:
        load_ratings_csv(write(tmp_path, bad))
    assert exc.value.row == 3


def test_non_integer_criterion_rejected(tmp_path):
    bad = WORKED_CSV.replace("DM,Spring,POS,5,5,4,5", "DM,Spring,POS,4.5,5,4,5")
    with pytest.raises(ParseError, match="row 2"):
        load_ratings_csv(write(tmp_path, bad))


def test_missing_column(tmp_path):
    text = WORKED_CSV.replace(",Ease,", ",Effort,")
    with pytest.raises(ParseError, match="Ease"):
        load_ratings_csv(write(tmp_path, text))


def test_empty_and_header_only(tmp_path):
    with pytest.raises(DatasetError):
        load_ratings_csv(write(tmp_path, ""))
    with pytest.raises(DatasetError):
        load_ratings_csv(write(tmp_path, HEADER))
    with pytest.raises(DatasetError):
        load_ratings_csv(tmp_path / "absent.csv")


def test_quoted_comma_in_item(tmp_path):
    ds = load_ratings_csv(write(tmp_path, HEADER + 'g1,"Sales, Forecast",DM,Spring,POS,3,3,3,3\n'))
    assert ds.records[0].item_id == "Sales, Forecast"


def test_csv_round_trip(tmp_path):
    ds = worked_example()
    ds.write_csv(tmp_path / "w.csv")
    back = load_ratings_csv(tmp_path / "w.csv", ds.decl)
    assert back.records == ds.records


def test_synthetic_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_records=50, seed=2))
    ds.write_csv(tmp_path / "s.csv")
    back = load_ratings_csv(tmp_path / "s.csv", ds.decl)
    assert back.fingerprint() == ds.fingerprint()
    assert [r.group_size for r in back] == [r.group_size for r in ds]


def test_schema_decl_parse_and_dump():
    decl = SchemaDecl.parse("group=G\nitem=I\noverall=R\ncontext.Time=T  # when\ncriterion.Q=q\nscale=0,10\n")
    assert decl.context_names == ("Time",) and decl.criteria_names == ("Q",)
    assert decl.scale == (0.0, 10.0)
    assert SchemaDecl.parse(decl.dumps()) == decl
    with pytest.raises(ValueError):
        SchemaDecl.parse("colour=red\n")


def test_vocab_sizes_and_unk():
    ds = worked_example()
    v = build_vocabs(ds)
    assert len(v["group"]) == 5 and len(v["item"]) == 5
    assert len(v["Class"]) == 4  # DM, DA, DB + UNK
    assert len(v["App"]) == 6
    assert v["App"].index("3") == 3
    assert v["group"].index("never-seen") == 0 and v["group"].token(0) == UNK
    assert "never-seen" not in v["group"]


def test_vocabs_json_round_trip():
    v = build_vocabs(worked_example())
    back = Vocabularies.from_json(v.to_json())
    assert back.schema() == v.schema()
    assert all(back[n] == v[n] for n in v.vocabs)


def test_unseen_tokens_encode_to_unk():
    train = worked_example()
    v = build_vocabs(train)
    schema = v.schema()
    r = train.records[0]
    other = type(r)("gX", "iX", {**r.contexts, "Class": "ZZ"}, r.criteria, 4.0)
    ex = encode_record(other, v, schema)
    names = schema.names
    assert ex.indices[names.index("group")] == 0
    assert ex.indices[names.index("item")] == 0
    assert ex.indices[names.index("Class")] == 0
    assert ex.indices[names.index("group_size")] == 0
    assert ex.indices[names.index("App")] == 5


def test_grs_encoding_has_two_indices():
    ds = worked_example()
    v = build_vocabs(ds)
    schema = scenario_schema(v.schema(), Scenario.grs())
    x, y = encode_dataset(ds, v, schema)
    assert x.shape == (4, 2)
    np.testing.assert_array_equal(x, [[1, 1], [2, 2], [3, 3], [4, 4]])
    np.testing.assert_array_equal(y, [5, 3, 3, 5])


def test_encode_schema_mismatch():
    ds = worked_example()
    v = build_vocabs(ds)
    schema = v.schema()
    v2 = build_vocabs(ds.subset(ds.records[:2]))
    with pytest.raises(EncodeError):
        encode_dataset(ds, v2, schema)


def test_group_size_buckets():
    assert [group_size_bucket(s) for s in (2, 3, 4, 5, 9, None)] == ["2", "3", "4", "5+", "5+", UNK]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_encoded_indices_within_vocab(seed):
    ds = generate_synthetic(SyntheticConfig(n_records=60, n_groups=8, n_items=6, seed=seed))
    tr, _, te = split(ds, (0.5, 0.25, 0.25), seed=seed)
    v = build_vocabs(tr)
    schema = v.schema()
    x, _ = encode_dataset(te, v, schema)
    for j, f in enumerate(schema):
        assert x[:, j].min() >= 0 and x[:, j].max() < f.vocab_size


def test_split_sizes_and_partition():
    ds = generate_synthetic(SyntheticConfig(n_records=1117, seed=0))
    tr, va, te = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr), len(va), len(te)) == (893, 111, 113)
    ids = [id(r) for part in (tr, va, te) for r in part]
    assert sorted(ids) == sorted(id(r) for r in ds)
    again = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert [p.fingerprint() for p in again] == [p.fingerprint() for p in (tr, va, te)]
    assert split(ds, (0.8, 0.1, 0.1), seed=4)[0].fingerprint() != tr.fingerprint()


def test_split_rejects_bad_fractions():
    ds = worked_example()
    with pytest.raises(SplitError):
        split(ds, (0.5, 0.5), 0)
    with pytest.raises(SplitError):
        split(ds, (0.8, 0.1, 0.1), 0)  # too small for three non-empty parts


def test_round_half_up():
    assert [round_half_up(v) for v in (2.5, 3.5, 4.49, 4.5)] == [3, 4, 4, 5]


def test_impute_criteria():
    base = worked_example().records[0]
    recs = [type(base)("g1", "x", base.contexts, {"App": a, "Data": a, "Ease": a}, 3.0) for a in (4, 5)]
    recs.append(type(base)("g2", "y", base.contexts, {"App": 1, "Data": 1, "Ease": 1}, 1.0))
    ds = Dataset(tuple(recs))
    assert impute_criteria(ds, "x") == {"App": 5, "Data": 5, "Ease": 5}
    # unseen item: global mean (4 + 5 + 1) / 3 = 3.33 -> 3
    assert impute_criteria(ds, "new") == {"App": 3, "Data": 3, "Ease": 3}


def test_impute_constant_data():
    ds = worked_example()
    const = ds.subset([type(r)(r.group_id, r.item_id, r.contexts, {k: 2 for k in r.criteria}, 2.0) for r in ds])
    assert impute_criteria(const, "anything") == {"App": 2, "Data": 2, "Ease": 2}


def test_synthetic_rule_examples():
    cfg = SyntheticConfig()
    assert synthetic_rating((5, 5, 5), {}, cfg) == 5.0
    assert synthetic_rating((2, 3, 4), {}, cfg) == 3.0
    shift = SyntheticConfig(rule="context_shift")
    assert synthetic_rating((3, 3, 3), {"Class": "Class0"}, shift) == 4.0
    assert synthetic_rating((3, 3, 3), {"Class": "Class1"}, shift) == 2.0
    assert synthetic_rating((3, 3, 3), {"Class": "Class2"}, shift) == 3.0
    assert synthetic_rating((1, 1, 1), {"Class": "Class1"}, shift) == 1.0


def test_synthetic_deterministic_and_seed_sensitive():
    a = generate_synthetic(SyntheticConfig(n_records=200, seed=5))
    assert a.fingerprint() == generate_synthetic(SyntheticConfig(n_records=200, seed=5)).fingerprint()
    assert a.fingerprint() != generate_synthetic(SyntheticConfig(n_records=200, seed=6)).fingerprint()


@pytest.mark.parametrize("rule", ["criteria_mean", "context_shift"])
def test_noiseless_synthetic_follows_rule_exactly(rule):
    cfg = SyntheticConfig(n_records=500, noise_std=0.0, rule=rule, seed=1)
    ds = generate_synthetic(cfg)
    oracle = np.array([synthetic_rating([r.criteria[n] for n in cfg.criteria_names], r.contexts, cfg) for r in ds])
    assert np.sqrt(np.mean((oracle - ds.targets()) ** 2)) == 0.0


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(n_records=0)
    with pytest.raises(ValueError):
        SyntheticConfig(rule="other")
    with pytest.raises(ValueError):
        SyntheticConfig(noise_std=-1)
