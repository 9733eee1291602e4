import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catsynth.dataset import (CategoricalDataset, Codebook, DataValidationError, VariableSpec,
                              cross_tabulate, drop_incomplete, encode, load_csv, table_subsets,
                              write_csv, yrbs_codebook)


@pytest.fixture
def codebook():
    return Codebook((
        VariableSpec("sex", ("F", "M")),
        VariableSpec("grade", ("9", "10", "11")),
        VariableSpec("smoke", ("Yes", "No"), sensitive=True),
    ))


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_codebook_validation():
    with pytest.raises(DataValidationError):
        VariableSpec("x", ("a",))
    with pytest.raises(DataValidationError):
        VariableSpec("x", ("a", "a"))
    with pytest.raises(DataValidationError, match="duplicate"):
        Codebook((VariableSpec("x", ("a", "b")), VariableSpec("x", ("c", "d"))))


def test_codebook_dict_round_trip(codebook):
    assert Codebook.from_dict(codebook.to_dict()) == codebook


def test_load_csv_four_rows(tmp_path, codebook):
    path = write(tmp_path, "id,sex,grade,extra,smoke\n"
                           "a,F,9,x,Yes\nb,M,11,y,No\nc,M,10,z,No\nd,F,10,w,Yes\n")
    ds = load_csv(path, codebook, id_column="id")
    assert ds.n == 4
    np.testing.assert_array_equal(ds.values, [[1, 1, 1], [2, 3, 2], [2, 2, 2], [1, 2, 1]])
    assert ds.record_ids.tolist() == ["a", "b", "c", "d"]


def test_load_csv_unknown_label_names_variable_and_row(tmp_path, codebook):
    path = write(tmp_path, "sex,grade,smoke\nF,9,Yes\nOther,10,No\n")
    with pytest.raises(DataValidationError, match=r"sex.*row 2"):
        load_csv(path, codebook)


def test_load_csv_missing_header_column(tmp_path, codebook):
    path = write(tmp_path, "sex,smoke\nF,Yes\n")
    with pytest.raises(DataValidationError, match="grade"):
        load_csv(path, codebook)


def test_load_csv_delimiter_and_missing_tokens(tmp_path, codebook):
    path = write(tmp_path, "sex;grade;smoke\nF;NA;Yes\nM;10;No\n")
    ds = load_csv(path, codebook, missing_tokens={"NA"}, delimiter=";")
    assert ds.has_missing
    assert ds.values[0, 1] == 0


def test_yrbs_shaped_demo_file(tmp_path):
    cb = yrbs_codebook()
    assert cb.r == 13
    assert cb.arities == [2, 7, 2, 4, 7, 2, 4, 2, 2, 2, 2, 2, 2]
    assert cb.nonsensitive_names == ["city", "age", "sex", "grade", "race"]
    row = [v.levels[0] for v in cb.variables]
    path = tmp_path / "yrbs.csv"
    path.write_text(",".join(cb.names) + "\n" + ",".join(row) + "\n")
    assert load_csv(path, cb).r == 13


def test_drop_incomplete(codebook):
    vals = np.ones((10, 3), dtype=int)
    vals[[1, 4, 7], [0, 2, 1]] = 0
    ds = CategoricalDataset(codebook, vals)
    out = drop_incomplete(ds)
    assert out.n == 7
    assert out.record_ids.tolist() == ["1", "3", "4", "6", "7", "9", "10"]
    assert drop_incomplete(out) == out


def test_drop_incomplete_identity_and_empty(codebook):
    ds = CategoricalDataset(codebook, np.ones((3, 3), dtype=int))
    assert drop_incomplete(ds) == ds
    with pytest.raises(DataValidationError, match="empty"):
        drop_incomplete(CategoricalDataset(codebook, np.zeros((2, 3), dtype=int)))


def test_dataset_is_immutable(codebook):
    ds = CategoricalDataset(codebook, np.ones((3, 3), dtype=int))
    with pytest.raises(ValueError):
        ds.values[0, 0] = 2


def test_dataset_rejects_bad_codes_and_ids(codebook):
    with pytest.raises(DataValidationError, match="grade"):
        CategoricalDataset(codebook, [[1, 4, 1]])
    with pytest.raises(DataValidationError, match="unique"):
        CategoricalDataset(codebook, np.ones((2, 3), dtype=int), ["a", "a"])


def test_cross_tabulate_one_way():
    cb = Codebook((VariableSpec("x", ("a", "b")), VariableSpec("y", ("a", "b"))))
    ds = CategoricalDataset(cb, [[1, 1], [1, 1], [2, 2], [2, 2]])
    assert cross_tabulate(ds, ["x"]).cells == {(1,): 0.5, (2,): 0.5}
    two = cross_tabulate(ds, ["x", "y"], order=2)
    assert two.cells[(1, 2)] == 0 and two.cells[(2, 1)] == 0
    assert len(two.cells) == 4


def test_cross_tabulate_errors(codebook):
    ds = CategoricalDataset(codebook, np.ones((2, 3), dtype=int))
    with pytest.raises(DataValidationError):
        cross_tabulate(ds, ["nope"])
    with pytest.raises(ValueError):
        cross_tabulate(ds, ["sex", "sex"])
    with pytest.raises(ValueError):
        cross_tabulate(ds, ["sex"], order=2)


def test_three_way_matches_nested_loop_count():
    rng = np.random.default_rng(3)
    cb = Codebook(tuple(VariableSpec(f"v{j}", tuple(str(i) for i in range(d)))
                        for j, d in enumerate([2, 3, 4, 2])))
    ds = CategoricalDataset(cb, np.column_stack([rng.integers(1, d + 1, 300) for d in cb.arities]))
    tab = cross_tabulate(ds, ["v1", "v2", "v3"])
    for a, b, c in itertools.product(range(1, 4), range(1, 5), range(1, 3)):
        count = 0
        for row in ds.values:
            if row[1] == a and row[2] == b and row[3] == c:
                count += 1
        assert tab.cells[(a, b, c)] == count / 300


def test_table_subsets_touching(codebook):
    assert table_subsets(codebook, 2, ["smoke"]) == [("sex", "smoke"), ("grade", "smoke")]
    assert len(table_subsets(codebook, 2)) == 3


def test_write_then_load_round_trip(tmp_path, codebook):
    ds = CategoricalDataset(codebook, [[1, 2, 1], [2, 3, 2]], ["x", "y"])
    path = tmp_path / "out.csv"
    write_csv(ds, path, header_comments=["seed=1"])
    assert path.read_text().startswith("# seed=1\n")
    assert load_csv(path, codebook, id_column="record_id") == ds


datasets = st.integers(1, 4).flatmap(lambda r: st.tuples(
    st.lists(st.integers(2, 5), min_size=r, max_size=r),
    st.integers(1, 30),
    st.integers(0, 2**32 - 1)))


def _make(arities, n, seed):
    cb = Codebook(tuple(VariableSpec(f"v{j}", tuple(f"L{i}" for i in range(d)))
                        for j, d in enumerate(arities)))
    rng = np.random.default_rng(seed)
    vals = np.column_stack([rng.integers(1, d + 1, n) for d in arities])
    return CategoricalDataset(cb, vals)


@settings(max_examples=60, deadline=None)
@given(datasets)
def test_encode_decode_round_trip(args):
    ds = _make(*args)
    assert encode(ds.decode(), ds.codebook) == ds


@settings(max_examples=60, deadline=None)
@given(datasets, st.data())
def test_frequencies_sum_to_one(args, data):
    ds = _make(*args)
    t = data.draw(st.integers(1, ds.r))
    subset = data.draw(st.permutations(ds.codebook.names))[:t]
    tab = cross_tabulate(ds, subset)
    freq = tab.frequencies
    assert abs(freq.sum() - 1) <= 1e-12
    assert freq.min() >= 0 and freq.max() <= 1
    assert freq.size == np.prod([ds.codebook[v].d for v in subset])


@settings(max_examples=40, deadline=None)
@given(datasets, st.data())
def test_drop_incomplete_idempotent(args, data):
    ds = _make(*args)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=ds.values.size,
                                       max_size=ds.values.size))).reshape(ds.values.shape)
    vals = np.where(mask, 0, ds.values)
    holed = CategoricalDataset(ds.codebook, vals)
    if (vals == 0).any(axis=1).all():
        with pytest.raises(DataValidationError):
            drop_incomplete(holed)
        return
    once = drop_incomplete(holed)
    assert drop_incomplete(once) == once
    assert not once.has_missing
