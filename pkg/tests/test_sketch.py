import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mast import sketch as sk
from mast.rng import derive_stream, iteration_stream
from mast.sketch import BernoulliIndependent, FiniteSet, Identity, RandK, SketchSample


def gen(seed=0):
    return derive_stream(seed, 99)


# ---------------------------------------------------------------- sampling examples


def test_identity_sample_is_all_ones():
    for seed in range(3):
        assert np.array_equal(Identity(3).sample(gen(seed)).diagonal(), np.ones(3))


def test_randk_sample_has_k_entries_of_scale_d_over_k():
    s = RandK(4, 2).sample(gen(1))
    assert s.nnz == 2
    assert np.all(s.scales == 2.0)


def test_bernoulli_with_unit_probabilities_keeps_everything():
    for seed in range(3):
        assert np.array_equal(BernoulliIndependent((1.0, 1.0)).sample(gen(seed)).diagonal(), [1.0, 1.0])


def test_bernoulli_rejects_zero_probability():
    with pytest.raises(ValueError):
        BernoulliIndependent((0.5, 0.0))


def test_randk_rejects_bad_k():
    with pytest.raises(ValueError):
        RandK(3, 4)
    with pytest.raises(ValueError):
        RandK(3, 0)


# ---------------------------------------------------------------- apply


@pytest.mark.parametrize("op", [sk.apply, sk.apply_transpose])
def test_apply_examples(op):
    assert np.array_equal(op(SketchSample.from_diagonal([2.0, 0.0]), [3.0, 5.0]), [6.0, 0.0])
    v = np.array([0.3, -1.0, 2.5])
    assert np.array_equal(op(SketchSample.identity(3), v), v)
    s = SketchSample.from_mapping(4, {0: 2.0, 3: 2.0})
    assert np.array_equal(op(s, np.ones(4)), [2.0, 0.0, 0.0, 2.0])


def test_apply_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        sk.apply(SketchSample.identity(3), np.ones(4))


def test_sample_rejects_duplicates_and_negative_scales():
    with pytest.raises(ValueError):
        SketchSample(3, [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        SketchSample(3, [0], [-1.0])


def test_sample_equality_ignores_explicit_zeros():
    assert SketchSample(3, [0, 2], [2.0, 0.0]) == SketchSample.from_mapping(3, {0: 2.0})


# ---------------------------------------------------------------- spectral constants


def test_spectral_constant_examples():
    c = sk.spectral_constants(RandK(4, 2))
    assert (c.l_d, c.mu_d, c.l_s_max) == (2.0, 2.0, 4.0)
    c = sk.spectral_constants(BernoulliIndependent((0.5, 0.25)))
    assert (c.l_d, c.mu_d, c.l_s_max) == (4.0, 2.0, 16.0)
    c = sk.spectral_constants(Identity(7))
    assert (c.l_d, c.mu_d, c.l_s_max) == (1.0, 1.0, 1.0)


# ---------------------------------------------------------------- enumeration


def test_enumerate_randk_singletons():
    members = sk.enumerate_support(RandK(3, 1))
    assert len(members) == 3
    for s, prob in members:
        assert prob == pytest.approx(1 / 3, abs=1e-15)
        assert s.nnz == 1 and s.scales[0] == 3.0


def test_enumerate_finite_set():
    s1 = SketchSample.from_diagonal([2.0, 0.0])
    s2 = SketchSample.from_diagonal([0.0, 2.0])
    assert sk.enumerate_support(FiniteSet((s1, s2))) == [(s1, 0.5), (s2, 0.5)]


def test_enumerate_too_large_reports_exact_count():
    with pytest.raises(sk.SupportTooLarge) as info:
        sk.enumerate_support(RandK(30, 15), limit=10_000)
    assert info.value.count == 155117520 == math.comb(30, 15)


def test_bernoulli_support_skips_deterministic_coordinates():
    dist = BernoulliIndependent((1.0, 0.5, 0.25))
    members = dist.enumerate_support()
    assert len(members) == dist.support_size() == 4
    assert sum(p for _, p in members) == pytest.approx(1.0, abs=1e-15)
    assert all(s.diagonal()[0] == 1.0 for s, _ in members)


small_dists = st.one_of(
    st.integers(1, 8).flatmap(lambda d: st.builds(RandK, st.just(d), st.integers(1, d))),
    st.lists(st.floats(0.05, 1.0), min_size=1, max_size=8).map(lambda p: BernoulliIndependent(tuple(p))),
    st.integers(1, 8).map(Identity),
)


@settings(max_examples=60, deadline=None)
@given(small_dists)
def test_enumerated_moments_match_closed_forms(dist):
    table = dist.support_table()
    assert table.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(table.probs @ table.diagonals, 1.0, rtol=0, atol=1e-12)
    assert np.allclose(table.probs @ table.diagonals**2, dist.second_moment_diagonal(), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))))
def test_finite_set_of_randk_support_has_same_constants(dk):
    d, k = dk
    a = sk.spectral_constants(RandK(d, k))
    b = sk.spectral_constants(FiniteSet.from_support(sk.enumerate_support(RandK(d, k))))
    for u, v in ((a.l_d, b.l_d), (a.mu_d, b.mu_d), (a.l_s_max, b.l_s_max)):
        assert abs(u - v) <= 1e-12 * max(1.0, abs(u))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))), st.integers(0, 2**32))
def test_randk_samples_have_exactly_k_nonzeros(dk, seed):
    d, k = dk
    s = RandK(d, k).sample(gen(seed))
    assert s.nnz == k
    assert np.all(s.scales == d / k)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=1, max_size=20), st.integers(0, 2**32))
def test_bernoulli_samples_scale_by_inverse_probability(p, seed):
    dist = BernoulliIndependent(tuple(p))
    s = dist.sample(gen(seed))
    assert np.array_equal(s.scales, 1.0 / np.asarray(p)[s.indices])
    assert set(np.flatnonzero(np.asarray(p) == 1.0)) <= set(s.indices.tolist())


def test_randk_is_uniform_over_subsets():
    dist = RandK(4, 2)
    counts = {}
    n = 12_000
    g = gen(5)
    for _ in range(n):
        key = tuple(dist.sample(g).indices)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    # each subset has probability 1/6; 5 sigma band
    sigma = math.sqrt(n * (1 / 6) * (5 / 6))
    assert all(abs(c - n / 6) < 5 * sigma for c in counts.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))), st.integers(0, 2**32))
def test_batched_randk_rows_are_valid_sketches(dk, seed):
    d, k = dk
    rows = RandK(d, k).sample_diagonals(gen(seed), 20)
    assert rows.shape == (20, d)
    assert np.all(np.count_nonzero(rows, axis=1) == k)
    assert set(np.unique(rows)) <= {0.0, d / k}


def test_batched_samplers_are_uniform_and_match_moments():
    rows = RandK(4, 2).sample_diagonals(gen(6), 12_000)
    keys, counts = np.unique(rows != 0, axis=0, return_counts=True)
    assert len(keys) == 6
    sigma = math.sqrt(12_000 * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 2000) < 5 * sigma)
    bern = BernoulliIndependent((0.25, 1.0, 0.5))
    rows = bern.sample_diagonals(gen(7), 20_000)
    assert np.all(rows[:, 1] == 1.0)
    assert set(np.unique(rows[:, 0])) == {0.0, 4.0}
    assert np.array_equal(Identity(3).sample_diagonals(gen(0), 2), np.ones((2, 3)))
    assert FiniteSet.from_support(sk.enumerate_support(RandK(3, 1))).sample_diagonals(gen(0), 5).shape == (5, 3)


# ---------------------------------------------------------------- config specs and streams


def test_distribution_from_spec():
    assert sk.distribution_from_spec({"kind": "randk", "q": 0.25}, 8) == RandK(8, 2)
    assert sk.distribution_from_spec({"kind": "randk", "q": 0.01}, 8) == RandK(8, 1)
    assert sk.distribution_from_spec({"kind": "randk", "k": 3}, 8) == RandK(8, 3)
    assert sk.distribution_from_spec({"kind": "bernoulli", "p": 0.5}, 2) == BernoulliIndependent((0.5, 0.5))
    assert sk.distribution_from_spec({"kind": "identity"}, 2) == Identity(2)
    with pytest.raises(ValueError):
        sk.distribution_from_spec({"kind": "gaussian"}, 2)
    with pytest.raises(ValueError):
        sk.distribution_from_spec({"kind": "bernoulli", "p": [0.5]}, 2)


def test_streams_depend_only_on_keys():
    a = iteration_stream(7, 3).random(4)
    b = iteration_stream(7, 3).random(4)
    c = iteration_stream(7, 4).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(derive_stream(7, 1).random(2), derive_stream(8, 1).random(2))
