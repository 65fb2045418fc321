import math

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from moerpl import numerics
from moerpl.errors import ContractViolation


def test_matmul_identity():
    m = np.arange(9, dtype=np.float64).reshape(3, 3)
    assert np.array_equal(numerics.matmul(np.eye(3), m), m)


def test_matmul_hand_example():
    out = numerics.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out, np.array([[2.0], [4.0]]))


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolation):
        numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_is_repeatable():
    rng = numerics.make_rng(3, 9)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
    assert np.array_equal(numerics.matmul(a, b), numerics.matmul(a, b))


@pytest.mark.parametrize('row, expected', [
    ([0.0, math.log(3.0)], [0.25, 0.75]),
    ([2.0, 2.0, 2.0, 2.0], [0.25, 0.25, 0.25, 0.25]),
])
def test_softmax_examples(row, expected):
    out = numerics.softmax_rows(np.array([row]))
    assert out[0] == pytest.approx(expected, abs=1e-12)


def test_softmax_large_logits_do_not_overflow():
    out = numerics.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rejects_nan():
    with pytest.raises(ContractViolation):
        numerics.softmax_rows(np.array([[0.0, np.nan]]))


def test_softmax_rows_sum_to_one_on_random_rows():
    rng = numerics.make_rng(0, 1)
    m = rng.standard_normal((1000, 16)) * 10
    assert np.max(np.abs(numerics.softmax_rows(m).sum(axis=1) - 1.0)) < 1e-12
    single = numerics.softmax_rows(m.astype(np.float32))
    assert np.max(np.abs(single.sum(axis=1) - 1.0)) < 1e-6


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=32))
def test_softmax_row_sums_property(row):
    out = numerics.softmax_rows(np.array([row], dtype=np.float64))
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_topk_ties_go_to_lower_index():
    assert numerics.topk_indices(np.array([[0.2, 0.4, 0.4, 0.0]]), 2).tolist() == [[1, 2]]
    assert numerics.topk_indices(np.array([[1.0, 1.0, 0.0]]), 1).tolist() == [[0]]


def test_same_seed_same_draws():
    a = numerics.make_rng(42, numerics.STREAM_INIT).standard_normal(8)
    b = numerics.make_rng(42, numerics.STREAM_INIT).standard_normal(8)
    c = numerics.make_rng(42, numerics.STREAM_TRAIN).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_unknown_precision():
    with pytest.raises(ContractViolation):
        numerics.dtype_for('half')


def test_as_matrix_checks_shape_and_finiteness():
    assert numerics.as_matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ContractViolation):
        numerics.as_matrix([[np.inf]])
