import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mast import data as dd
from mast.data import Dataset, LibsvmError, parse_libsvm, serialize_libsvm


def test_parse_single_row():
    ds = parse_libsvm("-1 3:1 11:1")
    assert ds.labels.tolist() == [-1.0]
    row = ds.rows.getrow(0)
    assert dict(zip(row.indices.tolist(), row.data.tolist())) == {2: 1.0, 10: 1.0}
    assert ds.d == 11


def test_parse_allows_empty_feature_list():
    ds = parse_libsvm("+1\n-1 1:0.5")
    assert (ds.n, ds.d) == (2, 1)


@pytest.mark.parametrize("text", ["1 2:1 2:1", "1 3:1 2:1", "1 0:1", "2 1:1", "1 1:nan", "1 1", "x 1:1",
                                  "0 1:1\n-1 1:1", "# only a comment\n"])
def test_parse_errors(text):
    with pytest.raises(LibsvmError):
        parse_libsvm(text)


def test_parse_error_reports_line_number():
    with pytest.raises(LibsvmError) as info:
        parse_libsvm("+1 1:1\n\n-1 2:1 2:3\n")
    assert info.value.line == 3


def test_zero_one_labels_map_to_signs():
    ds = parse_libsvm("0 1:1\n1 2:1  # trailing comment\n")
    assert ds.labels.tolist() == [-1.0, 1.0]


def test_hash_ignores_formatting():
    a = parse_libsvm("1 1:1.0 2:0.50\n0 3:2")
    b = parse_libsvm("+1  1:1   2:0.5\n-1 3:2.000\n")
    assert a.content_hash == b.content_hash and a == b


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert dd.fnv1a_64(b"") == 0xCBF29CE484222325
    assert dd.fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert dd.fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_n_features_pads_columns():
    assert parse_libsvm("1 2:1", n_features=5).d == 5


datasets = st.lists(
    st.tuples(
        st.sampled_from([-1.0, 1.0]),
        st.dictionaries(st.integers(0, 11), st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False).filter(bool),
                        max_size=6),
    ),
    min_size=1,
    max_size=15,
)


def build(rows):
    labels = [r[0] for r in rows]
    dense = np.zeros((len(rows), 12))
    for i, (_, feats) in enumerate(rows):
        for j, v in feats.items():
            dense[i, j] = v
    return Dataset(sp.csr_matrix(dense), np.array(labels))


@settings(max_examples=60, deadline=None)
@given(datasets)
def test_serialize_parse_round_trip(rows):
    ds = build(rows)
    again = parse_libsvm(serialize_libsvm(ds), n_features=ds.d)
    assert again.content_hash == ds.content_hash
    assert np.array_equal(again.labels, ds.labels)
    assert (again.rows != ds.rows).nnz == 0


def test_split_examples():
    ds = build([(1.0, {0: 1.0})] * 4)
    assert dd.split(ds, (0.75, 0.25), seed=3).sizes == (3, 1)
    big = build([(1.0 if i % 2 else -1.0, {i % 12: float(i + 1)}) for i in range(100)])
    assert dd.split(big, (0.7, 0.18, 0.12), seed=0).sizes == (70, 18, 12)


def test_split_sizes_largest_remainder():
    assert dd.split_sizes(10, (1 / 3, 1 / 3, 1 / 3)) == [4, 3, 3]
    assert dd.split_sizes(7, (0.5, 0.5)) == [4, 3]
    assert dd.split_sizes(5, (1.0,)) == [5]


@pytest.mark.parametrize("fractions", [(0.5, 0.4), (0.5, -0.5, 1.0), ()])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(ValueError):
        dd.split(build([(1.0, {0: 1.0})] * 4), fractions, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31), st.sampled_from([(1.0,), (0.8, 0.2), (0.7, 0.18, 0.12)]))
def test_split_is_deterministic_disjoint_and_covering(n, seed, fractions):
    ds = build([(1.0, {i % 12: float(i + 1)}) for i in range(n)])
    a = dd.split(ds, fractions, seed)
    b = dd.split(ds, fractions, seed)
    assert all(np.array_equal(x, y) for x, y in zip(a.parts, b.parts))
    joined = np.concatenate(a.parts)
    assert np.array_equal(np.sort(joined), np.arange(n))
    assert sum(a.sizes) == n


def test_split_part_accessors():
    ds = build([(1.0, {i % 12: float(i + 1)}) for i in range(20)])
    three = dd.split(ds, (0.6, 0.2, 0.2), 0)
    assert three.has_validation and three.has_test
    assert np.array_equal(three.test, three.parts[2])
    one = dd.split(ds, (1.0,), 0)
    assert not one.has_test
    with pytest.raises(AttributeError):
        one.validation


def toy_accuracy_set():
    return Dataset(sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 1.0]])), np.array([1.0, -1.0]))


def test_accuracy_examples():
    ds = toy_accuracy_set()
    assert dd.accuracy(ds, [0, 1], np.zeros(2)) == 0.0
    assert dd.accuracy(ds, [0, 1], np.array([1.0, -1.0])) == 1.0
    with pytest.raises(ValueError):
        dd.accuracy(ds, [], np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_accuracy_sign_flip_and_scale_invariance(seed, scale):
    g = np.random.default_rng(seed)
    ds = Dataset(sp.csr_matrix(g.standard_normal((30, 5))), np.where(g.random(30) < 0.5, -1.0, 1.0))
    x = g.standard_normal(5)
    idx = np.arange(30)
    a = dd.accuracy(ds, idx, x)
    assert dd.accuracy(ds, idx, scale * x) == a
    assert dd.accuracy(ds, idx, -x) == pytest.approx(1.0 - a, abs=1e-15)


def test_batch_accuracy_matches_single():
    g = np.random.default_rng(0)
    ds = Dataset(sp.csr_matrix(g.standard_normal((25, 4))), np.where(g.random(25) < 0.5, -1.0, 1.0))
    models = g.standard_normal((6, 4))
    idx = np.arange(3, 20)
    assert np.array_equal(dd.batch_accuracy(ds, idx, models), [dd.accuracy(ds, idx, m) for m in models])


def test_with_intercept_appends_constant_column():
    ds = toy_accuracy_set().with_intercept()
    assert ds.d == 3
    assert np.array_equal(ds.rows.toarray()[:, -1], [1.0, 1.0])


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(sp.csr_matrix(np.ones((2, 1))), np.array([1.0, 0.0]))


def test_shipped_fixture_is_frozen():
    ds = dd.load_fixture()
    assert (ds.n, ds.d) == (2000, 100)
    assert f"{ds.content_hash:016x}" == "25bed905c278f38c"
    assert ds == dd.synthetic_mixed(2000, 100, seed=0)


def test_unknown_fixture():
    with pytest.raises(KeyError):
        dd.fixture_path("a9a")


def test_load_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        dd.load_libsvm(tmp_path / "missing.libsvm")
