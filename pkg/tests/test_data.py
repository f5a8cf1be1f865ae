import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tallmixed.data import (ColumnSchema, DataError, Dataset, SchemaError, assign_designs,
                            bin_continuous, bin_label_column, collapse, enumerate_designs,
                            format_schema, load_csv, observed_grid, parse_schema,
                            partition_by_practice, standardize)

from conftest import make_dataset

SCHEMA = "y = outcome:binary\nx = covariate:count\npractice = cluster:categorical\n"


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_schema_round_trip():
    text = ("y = outcome:binary\nsex = covariate:categorical:f|m\n"
            "age = covariate:continuous  # years\nprac = cluster:categorical\nexpo = exposure:continuous\n")
    schema = parse_schema(text)
    assert [c.name for c in schema] == ["y", "sex", "age", "prac", "expo"]
    assert schema[1].levels == ("f", "m")
    assert parse_schema(format_schema(schema)) == schema


@pytest.mark.parametrize("text, match", [
    ("x = covariate:binary\ng = cluster:categorical\n", "outcome"),
    ("y = outcome:binary\n", "cluster"),
    ("y = outcome:binary\ng = cluster:categorical\ne = exposure:continuous\nf = exposure:continuous\n",
     "exposure"),
    ("y = outcome:binary\ng = cluster:categorical\nc = covariate:categorical\n", "level"),
    ("y = outcome:bogus\n", "kind"),
    ("y outcome binary\n", "expected"),
])
def test_schema_errors(text, match):
    with pytest.raises(SchemaError, match=match):
        parse_schema(text)


def test_load_csv_basic(tmp_path):
    p = write(tmp_path, "y,x,practice\n1,0,a\n0,2,b\n1,1,a\n0,0,c\n")
    ds = load_csv(p, parse_schema(SCHEMA))
    assert ds.n_rows == 4
    assert ds.cluster.tolist() == [0, 1, 0, 2]
    assert ds.cluster_labels == ("a", "b", "c")
    assert ds.n_clusters == 3


def test_load_csv_dense_reindex(tmp_path):
    p = write(tmp_path, "y,x,practice\n1,0,a\n0,2,b\n1,1,a\n")
    ds = load_csv(p, parse_schema(SCHEMA))
    assert ds.cluster.tolist() == [0, 1, 0]
    assert ds.n_clusters == 2


def test_load_csv_missing_column(tmp_path):
    p = write(tmp_path, "y,x,practice\n1,0,a\n")
    schema = parse_schema(SCHEMA + "age = covariate:continuous\n")
    with pytest.raises(SchemaError, match="age"):
        load_csv(p, schema)


def test_load_csv_bad_cell_reports_row(tmp_path):
    p = write(tmp_path, "y,x,practice\n1,0,a\n1,oops,b\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p, parse_schema(SCHEMA))


@pytest.mark.parametrize("cell", ["2", "-1", ""])
def test_load_csv_rejects_invalid_binary_and_missing(tmp_path, cell):
    p = write(tmp_path, f"y,x,practice\n{cell},0,a\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(p, parse_schema(SCHEMA))


def test_load_csv_empty(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_csv(write(tmp_path, ""), parse_schema(SCHEMA))
    with pytest.raises(DataError, match="no data"):
        load_csv(write(tmp_path, "y,x,practice\n", "h.csv"), parse_schema(SCHEMA))


def test_csv_round_trip(tmp_path):
    ds = make_dataset({"y": [1, 0, 1], "c": ["m", "f", "m"], "z": [0.1, 2.5, -3.0], "g": ["p", "q", "p"]},
                      {"c": ("categorical", ("f", "m")), "z": "continuous"})
    p = tmp_path / "out.csv"
    ds.to_csv(p)
    back = load_csv(p, ds.schema)
    assert back.rows() == ds.rows()
    assert back.column("c").tolist() == [1, 0, 1]


@pytest.mark.parametrize("values, expected", [
    ([1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]),
    ([0.0, 10.0], [-np.sqrt(0.5), np.sqrt(0.5)]),
])
def test_standardize(values, expected):
    ds = make_dataset({"y": [0] * len(values), "a": values, "g": ["x"] * len(values)}, {"a": "continuous"})
    out = standardize(ds, "a")
    np.testing.assert_allclose(out.column("a"), expected, atol=1e-12)
    assert out.transforms["a"]["mean"] == pytest.approx(np.mean(values))


def test_standardize_zero_variance():
    ds = make_dataset({"y": [0, 1, 0], "a": [5.0, 5.0, 5.0], "g": ["x"] * 3}, {"a": "continuous"})
    with pytest.raises(DataError, match="zero variance"):
        standardize(ds, "a")


def test_standardize_idempotent_and_composes():
    rng = np.random.default_rng(1)
    raw = rng.normal(50, 17, size=200)
    ds = make_dataset({"y": [0] * 200, "a": raw, "g": ["x"] * 200}, {"a": "continuous"})
    once = standardize(ds, "a")
    twice = standardize(once, "a")
    np.testing.assert_allclose(twice.column("a"), once.column("a"), atol=1e-12)
    t = twice.transforms["a"]
    np.testing.assert_allclose(twice.column("a") * t["sd"] + t["mean"], raw, atol=1e-9)


def test_bin_quartiles_balanced():
    ds = make_dataset({"y": [0] * 8, "a": np.arange(1.0, 9.0), "g": ["x"] * 8}, {"a": "continuous"})
    out = bin_continuous(ds, "a")
    assert out.column(bin_label_column("a")).tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    np.testing.assert_array_equal(out.column("a"), ds.column("a"))


def test_bin_explicit_cutpoints():
    ds = make_dataset({"y": [0] * 4, "a": [1.0, 2.0, 3.0, 4.0], "g": ["x"] * 4}, {"a": "continuous"})
    out = bin_continuous(ds, "a", [2.5])
    assert out.column("a__bin").tolist() == [0, 0, 1, 1]


def test_bin_right_open_and_max_in_top():
    ds = make_dataset({"y": [0] * 5, "a": [1.0, 2.0, 2.5, 3.0, 9.0], "g": ["x"] * 5}, {"a": "continuous"})
    out = bin_continuous(ds, "a", [2.5, 9.0])
    assert out.column("a__bin").tolist() == [0, 0, 1, 1, 2]


@pytest.mark.parametrize("scheme", ["quartiles", [1.0, 2.0]])
def test_bin_too_few_values(scheme):
    ds = make_dataset({"y": [0] * 4, "a": [3.0] * 4, "g": ["x"] * 4}, {"a": "continuous"})
    with pytest.raises(DataError):
        bin_continuous(ds, "a", scheme)


def test_bin_rejects_unsorted_cutpoints():
    ds = make_dataset({"y": [0] * 4, "a": [1.0, 2.0, 3.0, 4.0], "g": ["x"] * 4}, {"a": "continuous"})
    with pytest.raises(DataError, match="increasing"):
        bin_continuous(ds, "a", [3.0, 2.0])


def test_enumerate_design_counts():
    grid = enumerate_designs({"time": range(1, 20), "case": [0, 1], "i1": [0, 1], "i2": [0, 1]})
    assert len(grid) == 152
    grid = enumerate_designs({"age": [-1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 2.5], "sex": [0, 1],
                              "m": [0, 1], "h": [0, 1], "v": [0, 1]}, [["m", "h", "v"]])
    assert len(grid) == 72
    assert len(enumerate_designs({"x": [0, 1]})) == 2


def test_enumerate_designs_lexicographic_and_indexable():
    grid = enumerate_designs({"a": [0, 1], "b": [5, 6, 7]})
    assert grid.values.tolist() == [list(map(float, t)) for t in itertools.product([0, 1], [5, 6, 7])]
    assert grid.index_of([1, 6]) == 4
    assert grid.design(4) == {"a": 1.0, "b": 6.0}
    with pytest.raises(KeyError):
        grid.index_of([2, 6])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.data())
def test_enumerate_designs_matches_brute_force(sizes, data):
    names = [f"c{k}" for k in range(len(sizes))]
    levels = {n: list(range(s)) for n, s in zip(names, sizes)}
    binaries = [n for n, s in zip(names, sizes) if s == 2]
    groups = []
    if len(binaries) >= 2:
        groups = [data.draw(st.lists(st.sampled_from(binaries), min_size=2, unique=True))]
    grid = enumerate_designs(levels, groups)
    brute = [c for c in itertools.product(*levels.values())
             if all(sum(c[names.index(n)] == 1 for n in g) <= 1 for g in groups)]
    assert grid.values.tolist() == [list(map(float, c)) for c in brute]


def test_assign_designs_nearest_level():
    grid = enumerate_designs({"a": [-1.0, 0.0, 1.0], "s": [0, 1]})
    ds = make_dataset({"y": [0, 1, 0, 1], "a": [-0.9, 0.4, 0.6, 7.0], "s": [0, 1, 1, 0], "g": ["x"] * 4},
                      {"a": "continuous"})
    idx = assign_designs(grid, ds)
    assert [grid.design(i) for i in idx] == [{"a": -1.0, "s": 0.0}, {"a": 0.0, "s": 1.0},
                                            {"a": 1.0, "s": 1.0}, {"a": 1.0, "s": 0.0}]


def test_assign_designs_excluded_combination():
    grid = enumerate_designs({"m": [0, 1], "h": [0, 1]}, [["m", "h"]])
    ds = make_dataset({"y": [0, 1], "m": [1, 1], "h": [0, 1], "g": ["x", "x"]}, {})
    assert assign_designs(grid, ds).tolist() == [grid.index_of([1, 0]), -1]


def test_observed_grid():
    ds = make_dataset({"y": [0, 1, 0], "a": [2, 1, 2], "b": [0, 1, 0], "g": ["x"] * 3}, {"a": "count"})
    grid = observed_grid(ds, ["a", "b"])
    assert grid.values.tolist() == [[1.0, 1.0], [2.0, 0.0]]


def test_collapse_identical_rows():
    ds = make_dataset({"y": [1, 1, 1], "x": [0, 0, 0], "g": ["a", "a", "a"]}, {})
    c = collapse(ds)
    assert c.n_rows == 1 and c.weights.tolist() == [3.0]


def test_collapse_keeps_clusters_apart():
    ds = make_dataset({"y": [1, 1], "x": [0, 0], "g": ["a", "b"]}, {})
    c = collapse(ds)
    assert c.n_rows == 2 and c.weights.tolist() == [1.0, 1.0]


def test_collapse_group_mean():
    ds = make_dataset({"y": [1, 1, 0, 1], "age": [40.0, 44.0, 41.0, 90.0], "g": ["a"] * 4},
                      {"age": "continuous"})
    ds = bin_continuous(ds, "age", [60.0])
    c = collapse(ds, ["age"])
    got = {(int(y), int(b)): (m, w) for y, b, m, w in
           zip(c.y, c.column("age__bin"), c.column("age"), c.weights)}
    assert got[(1, 0)] == (42.0, 2.0)
    assert got[(0, 0)] == (41.0, 1.0)
    assert got[(1, 1)] == (90.0, 1.0)


def test_collapse_continuous_needs_bins():
    ds = make_dataset({"y": [1, 0], "age": [40.0, 44.0], "g": ["a", "a"]}, {"age": "continuous"})
    with pytest.raises(DataError, match="bin"):
        collapse(ds)


def test_collapse_exposure_is_exact_key():
    ds = make_dataset({"y": [1, 1, 1], "x": [0, 0, 0], "g": ["a"] * 3, "e": [1.0, 1.0, 2.0]},
                      {"y": "count"}, exposure="e")
    c = collapse(ds)
    assert sorted(zip(c.exposure.tolist(), c.weights.tolist())) == [(1.0, 2.0), (2.0, 1.0)]


def test_collapsed_csv_has_weight_and_mean_columns(tmp_path):
    ds = make_dataset({"y": [1, 1], "age": [40.0, 44.0], "g": ["a", "a"]}, {"age": "continuous"})
    c = collapse(bin_continuous(ds, "age", [50.0]), ["age"])
    p = tmp_path / "c.csv"
    c.to_csv(p)
    header = p.read_text().splitlines()[0].split(",")
    assert header[-1] == "weight" and "age__mean" in header


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2), st.integers(0, 3)), min_size=1, max_size=60))
def test_collapse_conserves_mass_and_keys(rows):
    y, x, g = map(list, zip(*rows))
    ds = make_dataset({"y": y, "x": x, "g": [f"c{k}" for k in g]}, {"x": "count"})
    c = collapse(ds)
    assert c.weights.sum() == len(rows)
    keys = list(zip(c.y.tolist(), c.column("x").tolist(), c.cluster.tolist()))
    assert len(set(keys)) == len(keys) == len(set(rows))


def test_partition_by_practice():
    ds = make_dataset({"y": [0, 1, 0, 1, 1], "x": [0, 1, 2, 3, 4], "g": ["a", "a", "b", "b", "b"]},
                      {"x": "count"})
    parts = partition_by_practice(ds)
    assert [p.n_rows for p in parts] == [2, 3]
    assert parts[1].column("x").tolist() == [2, 3, 4]
    assert parts[1].cluster_labels == ("b",)
    single = make_dataset({"y": [0, 1], "x": [0, 1], "g": ["a", "a"]}, {"x": "count"})
    (only,) = partition_by_practice(single)
    assert only.rows() == single.rows()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_partition_is_permutation(codes):
    n = len(codes)
    ds = make_dataset({"y": [0] * n, "x": list(range(n)), "g": [f"c{k}" for k in codes]}, {"x": "count"})
    parts = partition_by_practice(ds)
    assert all(p.n_rows >= 1 for p in parts)
    assert sorted(v for p in parts for v in p.column("x").tolist()) == list(range(n))


def test_dataset_immutable():
    ds = make_dataset({"y": [0, 1], "x": [0, 1], "g": ["a", "a"]}, {})
    with pytest.raises(ValueError):
        ds.column("x")[0] = 5
    with pytest.raises(TypeError):
        ds.columns["x"] = None


def test_column_schema_rejects_duplicates():
    with pytest.raises(SchemaError):
        ColumnSchema("c", "covariate", "categorical", ("a", "a"))
    with pytest.raises(SchemaError, match="duplicate"):
        Dataset.from_columns([ColumnSchema("y", "outcome", "binary"), ColumnSchema("y", "covariate", "binary"),
                              ColumnSchema("g", "cluster", "categorical")], {"y": [0], "g": ["a"]})
