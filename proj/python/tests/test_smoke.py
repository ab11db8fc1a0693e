import pathlib

import pytest

import gradfe

DATA = pathlib.Path(__file__).resolve().parents[2] / "data"


@pytest.fixture(scope="module")
def toy():
    return gradfe.load_csv(str(DATA / "toy_three_features.csv"), target="target", task="reg")


def test_dataset_shape(toy):
    assert toy.names == ["x0", "x1", "x2"]
    assert toy.rows == 200
    assert toy.task == "regression"
    assert "square" in gradfe.transformation_names()
    assert len(toy.transformations) == 9


def test_feature_strings(toy):
    assert toy.order("x0 x1 add log") == 2
    assert toy.canonical("x1 x0 add") == toy.canonical("x0 x1 add")
    assert toy.infix("x0 x1 divide") == "(x0 / x1)"
    assert set(toy.equivalents("x0 x1 add")) == {"x0 x1 add", "x1 x0 add"}
    for s in toy.sample(max_order=3, seed=4, n=20):
        assert 1 <= toy.order(s) <= 3


def test_parse_errors(toy):
    with pytest.raises(gradfe.ParseError):
        toy.order("x0 add")
    with pytest.raises(gradfe.ParseError):
        toy.order("x0 nope")


def test_evaluate(toy):
    base = toy.baseline()["metric"]
    a = toy.evaluate("x0 x1 multiply")
    b = toy.evaluate("x1 x0 multiply")
    assert a["metric"] == b["metric"]
    assert a["loss"] == pytest.approx(1 - a["metric"])
    assert len(a["fold_scores"]) == 5
    assert 0 < base <= 1
    assert toy.evaluate("x0 x0 subtract") is None
    assert toy.column("x0 x0 subtract") is None
    assert len(toy.column("x0 log")) == 200


def test_from_columns():
    xs = [float(i) for i in range(30)]
    ds = gradfe.from_columns(["a", "b"], [xs, [x * x for x in xs]], [2 * x + 1 for x in xs], task="reg")
    assert ds.rows == 30
    assert ds.evaluate("a b add") is not None
    with pytest.raises(gradfe.DataError):
        gradfe.from_columns(["a"], [xs], [1.0] * 30, task="reg")


def test_missing_target():
    with pytest.raises(gradfe.ConfigError, match="nope"):
        gradfe.load_csv(str(DATA / "toy_three_features.csv"), target="nope")


def test_small_search_is_deterministic(toy):
    kw = dict(seed=3, budget=40, population=24, max_order=3, train_epochs=4, finetune_epochs=1)
    a = toy.search(**kw)
    b = toy.search(workers=2, **kw)
    a.pop("timings")
    b.pop("timings")
    assert a == b
    assert a["budget"]["spent"] == 40
    assert a["selection"]["joint_metric"] >= a["base"]["metric"]
    keys = [c["canonical"] for c in a["candidates"]]
    assert len(keys) == len(set(keys))
