import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import DivergenceError, DomainError, StructuralError
from fedsim.params import LayerLayout, ParamVector, cosine_similarity, merge, split, weighted_average

finite = st.floats(-1e3, 1e3, allow_nan=False)


def pv(values):
    return ParamVector(values)


@pytest.mark.parametrize("weights, expected", [((1, 1), [2.0, 3.0]), ((3, 1), [1.5, 2.5])])
def test_weighted_average_small_cases(weights, expected):
    out = weighted_average([pv([1, 2]), pv([3, 4])], weights)
    assert isinstance(out, ParamVector)
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-15)


def test_weighted_average_single_vector_is_identity():
    v = pv([0.3, -1.7, 2.0])
    assert weighted_average([v], [7]) == v


def test_weighted_average_rejects_zero_weights_and_mismatches():
    with pytest.raises(DomainError):
        weighted_average([pv([1.0]), pv([2.0])], [0, 0])
    with pytest.raises(DomainError):
        weighted_average([pv([1.0]), pv([2.0])], [1, -1])
    other = ParamVector([1.0, 2.0], LayerLayout.from_sizes([("a", 1), ("b", 1)]))
    with pytest.raises(StructuralError):
        weighted_average([pv([1.0, 2.0]), other], [1, 1])
    with pytest.raises(StructuralError):
        weighted_average([np.ones(2), np.ones(3)], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.lists(finite, min_size=3, max_size=3), st.floats(0.01, 10)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_weighted_average_is_permutation_invariant(pairs, rnd):
    vecs = [np.array(v) for v, _ in pairs]
    ws = [w for _, w in pairs]
    ids = list(range(len(pairs)))
    ref = weighted_average(vecs, ws)
    rnd.shuffle(ids)
    shuffled = weighted_average([vecs[i] for i in ids], [ws[i] for i in ids])
    np.testing.assert_allclose(shuffled, ref, rtol=1e-12, atol=1e-9)
    # with ids the canonical order is restored, so the result is bit-identical
    canonical = weighted_average([vecs[i] for i in ids], [ws[i] for i in ids], ids=ids)
    assert np.array_equal(canonical, ref)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(finite, min_size=4, max_size=4), min_size=1, max_size=5))
def test_equal_weights_give_the_plain_mean(rows):
    arr = np.array(rows)
    np.testing.assert_allclose(weighted_average(list(arr), [2.5] * len(arr)), arr.mean(axis=0), rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("a, b, expected", [((1, 0), (0, 1), 0.0), ((1, 2), (2, 4), 1.0), ((1, 0), (-1, 0), -1.0)])
def test_cosine_similarity_cases(a, b, expected):
    assert cosine_similarity(pv(a), pv(b)) == pytest.approx(expected, abs=1e-15)


def test_cosine_similarity_rejects_zero_vector():
    with pytest.raises(DomainError):
        cosine_similarity(pv([0.0, 0.0]), pv([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_cosine_with_itself_is_one(v):
    assert cosine_similarity(pv(v), pv(v)) == pytest.approx(1.0, abs=1e-12)


def test_split_merge_round_trip_and_last_layer():
    layout = LayerLayout.from_sizes([("layer0", 3), ("layer1", 2)])
    v = ParamVector([1, 2, 3, 4, 5], layout)
    base, top = split(v, "layer0")
    assert base.tolist() == [1, 2, 3] and top.tolist() == [4, 5]
    assert merge(base, top, layout) == v
    base, top = split(v, "layer1")
    assert top.size == 0 and merge(base, top, layout) == v
    base, top = split(v, None)
    assert base.size == 0


def test_swapping_bases_is_recovered_by_resplitting():
    layout = LayerLayout.from_sizes([("a", 2), ("b", 3), ("c", 1)])
    v1 = ParamVector(np.arange(6.0), layout)
    v2 = ParamVector(-np.arange(6.0) - 1, layout)
    for boundary in layout.names:
        b1, t1 = split(v1, boundary)
        b2, t2 = split(v2, boundary)
        s1, s2 = merge(b2, t1, layout), merge(b1, t2, layout)
        assert np.array_equal(split(s1, boundary)[0], b2) and np.array_equal(split(s1, boundary)[1], t1)
        assert np.array_equal(split(s2, boundary)[0], b1) and np.array_equal(split(s2, boundary)[1], t2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=5).filter(lambda s: sum(s) > 0), st.data())
def test_split_merge_is_a_bijection_on_random_layouts(sizes, data):
    layout = LayerLayout.from_sizes([(f"L{k}", s) for k, s in enumerate(sizes)])
    values = data.draw(st.lists(finite, min_size=layout.dim, max_size=layout.dim))
    v = ParamVector(values, layout)
    boundary = data.draw(st.sampled_from(layout.names + [None]))
    base, top = split(v, boundary)
    assert base.size == layout.boundary_index(boundary)
    assert merge(base, top, layout) == v


def test_unknown_layer_and_bad_layouts():
    layout = LayerLayout.from_sizes([("a", 1)])
    with pytest.raises(StructuralError):
        split(ParamVector([1.0], layout), "zzz")
    with pytest.raises(StructuralError):
        LayerLayout((("a", (0, 1)), ("a", (1, 2))))
    with pytest.raises(StructuralError):
        LayerLayout((("a", (0, 1)), ("b", (2, 3))))
    with pytest.raises(StructuralError):
        ParamVector([1.0, 2.0], layout)


def test_param_vector_rejects_non_finite_and_is_read_only():
    with pytest.raises(DivergenceError):
        pv([1.0, np.nan])
    v = pv([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 5.0
    assert (v + v).values.tolist() == [2.0, 4.0]
    assert (2 * v - v) == v
