import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iam.numerics import ShapeError, causal_softmax_rows
from iam.similarity import (
    DomainError,
    SimilarityMetric,
    attention_similarity,
    batch_similarity,
    cosine,
    flatten_lower_triangular,
    minkowski,
    norm_compensation_scale,
    pearson,
    trace_cosine,
    truncate_for_similarity,
)


def random_attention(rng, n, temp=1.0):
    return causal_softmax_rows(rng.normal(size=(n, n)) * temp, 1.0)


def test_flatten_examples():
    np.testing.assert_array_equal(flatten_lower_triangular([[1, 0], [0.4, 0.6]]), [1, 0.4, 0.6])
    np.testing.assert_array_equal(flatten_lower_triangular([[5]]), [5])
    np.testing.assert_array_equal(flatten_lower_triangular(np.eye(3)), [1, 0, 1, 0, 0, 1])
    with pytest.raises(ShapeError):
        flatten_lower_triangular(np.ones((2, 3)))


def test_cosine_examples():
    assert cosine([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    # 1*3 + 2*2 + 3*1 = 10, |x|^2 = |y|^2 = 14
    assert cosine([1, 2, 3], [3, 2, 1]) == pytest.approx(10 / 14)
    assert 10 / 14 == pytest.approx(0.7143, abs=1e-4)
    with pytest.raises(DomainError):
        cosine([0, 0], [1, 1])


def test_minkowski_examples():
    assert minkowski([1, 2], [1, 2], 3) == 0
    assert minkowski([0, 0], [1, 2], 1) == 3
    assert minkowski([0, 0], [3, 4], 2) == pytest.approx(5)
    with pytest.raises(ValueError):
        minkowski([0], [1], 0.5)


def _textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return num / math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))


def test_pearson_examples():
    x = [1.0, 2.0, 3.0, 4.0]
    assert pearson(x, [2 * v + 1 for v in x]) == pytest.approx(1.0)
    assert pearson(x, [-v for v in x]) == pytest.approx(-1.0)
    expected = _textbook_pearson(x, [1, 2, 3, 5])
    assert expected == pytest.approx(0.9827, abs=1e-4)
    assert pearson(x, [1, 2, 3, 5]) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(DomainError):
        pearson([1, 1, 1], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.floats(0.01, 100), st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_pearson_affine(n, a, b, seed):
    x = np.random.default_rng(seed).normal(size=n)
    assert pearson(x, a * x + b) == pytest.approx(1.0, abs=1e-9)
    assert pearson(x, -a * x + b) == pytest.approx(-1.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_cosine_positive_scale_invariant(n, alpha, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random(n) + 0.01, rng.random(n) + 0.01
    assert cosine(alpha * x, y) == pytest.approx(cosine(x, y), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.sampled_from([1.0, 1.5, 2.0, 3.0]), st.integers(0, 2**32 - 1))
def test_minkowski_triangle(n, p, seed):
    x, y, z = np.random.default_rng(seed).normal(size=(3, n))
    assert minkowski(x, z, p) <= minkowski(x, y, p) + minkowski(y, z, p) + 1e-6


def test_trace_form_equals_flattened_cosine():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 33):
        a, b = random_attention(rng, n), random_attention(rng, n, 3.0)
        fa, fb = flatten_lower_triangular(a), flatten_lower_triangular(b)
        assert trace_cosine(a, b) == pytest.approx(cosine(fa, fb), abs=1e-6)


def test_attention_similarity_cases():
    rng = np.random.default_rng(1)
    a = random_attention(rng, 6)
    assert attention_similarity(a, a) == pytest.approx(1.0)
    assert attention_similarity([[1.0]], [[1.0]]) == pytest.approx(1.0)
    assert attention_similarity(a, a, SimilarityMetric("minkowski", 1)) == 0.0
    with pytest.raises(ShapeError):
        attention_similarity(a, np.eye(5))


def test_minkowski_similarity_is_negated_distance():
    rng = np.random.default_rng(2)
    a, b = random_attention(rng, 5), random_attention(rng, 5)
    d = minkowski(flatten_lower_triangular(a), flatten_lower_triangular(b), 2)
    assert attention_similarity(a, b, SimilarityMetric("minkowski", 2)) == pytest.approx(-d)


@pytest.mark.parametrize("name", ["cosine", "pearson", "minkowski1", "minkowski2", "cosine-norm"])
def test_batch_matches_pairwise(name):
    metric = SimilarityMetric.parse(name)
    rng = np.random.default_rng(4)
    large = np.stack([random_attention(rng, 9, t) for t in (0.5, 1, 2)])
    small = np.stack([random_attention(rng, 9, t) for t in (1, 3)])
    got = batch_similarity(large, small, metric)
    assert got.shape == (3, 2)
    for i in range(3):
        for j in range(2):
            assert got[i, j] == pytest.approx(attention_similarity(large[i], small[j], metric), abs=1e-9)


def test_metric_names_round_trip():
    for name in ["cosine", "pearson", "minkowski1", "minkowski2", "cosine-norm"]:
        assert SimilarityMetric.parse(name).name == name
    with pytest.raises(ValueError):
        SimilarityMetric("minkowski", 0.5)
    with pytest.raises(ValueError):
        SimilarityMetric("euclid")


def test_truncation():
    rng = np.random.default_rng(5)
    a = random_attention(rng, 50)
    assert truncate_for_similarity(a, 100) is a or np.array_equal(truncate_for_similarity(a, 100), a)
    big = random_attention(rng, 300)
    t = truncate_for_similarity(big, 100)
    assert t.shape == (100, 100)
    np.testing.assert_array_equal(t, big[:100, :100])
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-5)
    assert (t[np.triu_indices(100, 1)] == 0).all()


def test_truncated_block_equals_prefix_softmax():
    rng = np.random.default_rng(6)
    s = rng.normal(size=(20, 20)).astype(np.float32)
    np.testing.assert_allclose(truncate_for_similarity(causal_softmax_rows(s, 1.0), 8),
                               causal_softmax_rows(s[:8, :8], 1.0), atol=1e-7)


def test_norm_compensation_scale():
    a = np.eye(3)
    b = causal_softmax_rows(np.zeros((3, 3)), 1.0)
    scale = norm_compensation_scale(a, b)
    assert np.linalg.norm(b * scale) == pytest.approx(np.linalg.norm(a))
