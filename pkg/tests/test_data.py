from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakguard.data import DataError, RoleMap, TaskKind, column_matrix, load_csv, write_csv

from conftest import make_dataset


def _write(tmp_path, text, name="d.csv"):
    f = tmp_path / name
    f.write_text(text, encoding="utf-8")
    return f


def test_load_grouped_csv(tmp_path):
    ds = make_dataset()
    f = tmp_path / "d.csv"
    write_csv(ds, f)
    roles = RoleMap(outcome="outcome", positive_class="case", subject="subject", batch="batch")
    back = load_csv(f, roles)
    assert back.n_rows == 120
    assert back.predictors == ("x1", "x2", "x3")
    assert back.task == TaskKind.BINARY
    assert int(back.y.sum()) == int(ds.y.sum())


def test_positive_class_case(tmp_path):
    f = _write(tmp_path, "outcome,x\ncase,1\ncontrol,2\ncase,3\n")
    ds = load_csv(f, RoleMap(outcome="outcome", positive_class="case"))
    assert ds.task == TaskKind.BINARY
    assert ds.roles.positive_class == "case"
    assert ds.y.tolist() == [1.0, 0.0, 1.0]


def test_empty_cell_is_missing(tmp_path):
    f = _write(tmp_path, "outcome,x,z\n1,,a\n0,2.5,\n1,NA,b\n")
    ds = load_csv(f, RoleMap(outcome="outcome", positive_class="1"))
    assert ds["x"].missing.tolist() == [True, False, True]
    assert ds["z"].missing.tolist() == [False, True, False]


def test_quoted_fields(tmp_path):
    f = _write(tmp_path, 'outcome,name,x\n1,"a, b",1\n0,"say ""hi""",2\n')
    ds = load_csv(f, RoleMap(outcome="outcome", positive_class="1"))
    assert ds["name"].levels == ("a, b", 'say "hi"')


def test_missing_outcome_column(tmp_path):
    f = _write(tmp_path, "y,x\n1,2\n")
    with pytest.raises(DataError):
        load_csv(f, RoleMap(outcome="outcome"))


def test_role_overlap_rejected(tmp_path):
    f = _write(tmp_path, "outcome,s,x\n1,a,1\n0,b,2\n")
    with pytest.raises(DataError):
        load_csv(f, RoleMap(outcome="outcome", predictors=("s", "x"), subject="s", positive_class="1"))


def test_column_matrix_shapes(toy):
    assert column_matrix(toy, ["x1", "x2", "x3"]).shape == (120, 3)
    assert column_matrix(toy, []).shape == (120, 0)
    with pytest.raises(DataError):
        column_matrix(toy, ["outcome"])


@settings(max_examples=40, deadline=None)
@given(
    vals=st.lists(st.one_of(st.none(), st.floats(-1e6, 1e6, allow_nan=False)), min_size=2, max_size=30),
    labels=st.lists(st.sampled_from(["a", "b", "c,d", None]), min_size=2, max_size=30),
)
def test_csv_round_trip(tmp_path_factory, vals, labels):
    from leakguard.data import Column, Dataset

    n = min(len(vals), len(labels))
    y = ["1" if i % 2 else "0" for i in range(n)]
    cols = {
        "y": Column.categorical("y", y, levels=["0", "1"]),
        "num": Column("num", "numeric", np.array([np.nan if v is None else v for v in vals[:n]])),
        "cat": Column.categorical("cat", labels[:n]),
    }
    if all(v is None for v in vals[:n]) or all(lb is None for lb in labels[:n]):
        return
    ds = Dataset(cols, RoleMap(outcome="y", predictors=("num", "cat"), positive_class="1"))
    f = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, f)
    back = load_csv(f, RoleMap(outcome="y", positive_class="1"), numeric=["num"], categorical=["cat"])
    write_csv(back, f.with_name("e.csv"))
    again = load_csv(f.with_name("e.csv"), RoleMap(outcome="y", positive_class="1"), numeric=["num"],
                     categorical=["cat"])
    for name in ("num", "cat"):
        assert back[name].equals(again[name])
    assert np.array_equal(back["num"].values, ds["num"].values, equal_nan=True)
    assert back["cat"].as_strings() == ds["cat"].as_strings()
