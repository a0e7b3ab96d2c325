import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kbformer import core
from kbformer.rng import Rng


def test_matmul_identity_examples():
    a = core.matrix([[1, 2], [3, 4]])
    out = core.matmul(a, core.identity(2))
    assert out.tobytes() == a.tobytes()


def test_matmul_dot_product():
    assert core.matmul(core.matrix([[1, 2]]), core.matrix([[3], [4]])).tolist() == [[11.0]]


def test_matmul_dimension_mismatch():
    with pytest.raises(core.ShapeError):
        core.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (7, 16, 9), (4, 33, 1)])
def test_ordered_kernel_matches_reference_bitwise(shape):
    m, k, n = shape
    rng = Rng(m * 100 + k)
    a = rng.normal_matrix(m, k)
    b = rng.normal_matrix(k, n)
    assert core.matmul(a, b).tobytes() == core.ordered_matmul_reference(a, b).tobytes()


def test_matmul_batched_matches_per_slice():
    rng = Rng(3)
    a = np.stack([rng.normal_matrix(4, 5) for _ in range(3)])
    b = rng.normal_matrix(5, 2)
    out = core.matmul(a, b)
    for i in range(3):
        assert out[i].tobytes() == core.matmul(a[i], b).tobytes()


def test_parallel_mode_agrees_within_rounding():
    rng = Rng(4)
    a, b = rng.normal_matrix(8, 64), rng.normal_matrix(64, 8)
    with core.matmul_mode("parallel"):
        fast = core.matmul(a, b)
    assert core.get_matmul_mode() == "deterministic"
    np.testing.assert_allclose(fast, core.matmul(a, b), atol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.integers(1, 5))
def test_matmul_identity_property(row, rows):
    a = np.tile(np.array(row), (rows, 1))
    assert core.matmul(a, core.identity(len(row))).tobytes() == (a + 0.0).tobytes()


def test_relu_cases():
    assert core.relu(core.matrix([[-1, 0, 2]])).tolist() == [[0.0, 0.0, 2.0]]
    assert core.relu(core.matrix([[0.5]])).tolist() == [[0.5]]
    out = core.relu(-np.ones((3, 4)))
    assert not out.any()
    assert not np.signbit(core.relu(np.array([[-0.0]]))).any()


def test_softmax_examples():
    assert core.softmax_rows(core.matrix([[0, 0]])).tolist() == [[0.5, 0.5]]
    assert core.softmax_rows(core.matrix([[1000, 1000]])).tolist() == [[0.5, 0.5]]
    out = core.softmax_rows(core.matrix([[math.log(1), math.log(3)]]))
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-1e3, 1e3),
)
def test_softmax_rows_sum_and_shift(row, c):
    a = np.array([row])
    p = core.softmax_rows(a)
    assert abs(p.sum() - 1.0) <= 1e-12
    q = core.softmax_rows(a + c)
    assert np.argmax(p) == np.argmax(q) or np.isclose(p.max(), p[0, np.argmax(q)], atol=1e-12)
    assert np.abs(p - q).max() <= 1e-12


def test_layer_norm_examples():
    one, zero = np.ones((1, 3)), np.zeros((1, 3))
    assert not core.layer_norm(np.full((1, 3), 7.0), one, zero).any()
    out = core.layer_norm(core.matrix([[1, -1]]), np.ones((1, 2)), np.zeros((1, 2)), eps=0.0)
    assert out.tolist() == [[1.0, -1.0]]
    bias = core.matrix([[0.5, -2.0, 3.0]])
    out = core.layer_norm(Rng(0).normal_matrix(4, 3), np.zeros((1, 3)), bias)
    assert (out == bias).all()


def test_layer_norm_rejects_bad_gain_and_zero_variance_without_eps():
    with pytest.raises(core.ShapeError):
        core.layer_norm(np.ones((2, 3)), np.ones((1, 2)), np.zeros((1, 3)))
    with pytest.raises(core.NonFiniteError):
        core.layer_norm(np.ones((1, 3)), np.ones((1, 3)), np.zeros((1, 3)), eps=0.0)


def test_non_finite_inputs_are_errors():
    with pytest.raises(core.NonFiniteError):
        core.matrix([[1.0, float("nan")]])
    with np.errstate(over="ignore"), pytest.raises(core.NonFiniteError):
        core.scale(np.array([[1e308]]), 10.0)


def test_add_and_add_row_shapes():
    assert core.add_row(np.zeros((2, 2)), core.matrix([[1, 2]])).tolist() == [[1, 2], [1, 2]]
    with pytest.raises(core.ShapeError):
        core.add_row(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(core.ShapeError):
        core.add(np.zeros((2, 2)), np.zeros((3, 2)))


def test_causal_mask_and_heads():
    s = core.causal_mask_fill(np.zeros((3, 3)))
    assert (s[np.triu_indices(3, 1)] == core.MASK_VALUE).all()
    assert (s[np.tril_indices(3)] == 0).all()
    a = Rng(1).normal_matrix(5, 6)
    assert core.merge_heads(core.split_heads(a, 3)).tobytes() == a.tobytes()
    assert core.split_heads(a, 2).shape == (2, 5, 3)


def test_cross_entropy_uniform_logits():
    assert math.isclose(core.cross_entropy(np.zeros((4, 256)), [0, 1, 2, 3]), math.log(256), rel_tol=1e-14)


def test_embedding_out_of_range():
    with pytest.raises(core.ShapeError):
        core.embedding_lookup(np.zeros((4, 2)), [4])


def test_mean_rows_ascending_sum():
    a = core.matrix([[1, 2], [3, 4], [5, 9]])
    assert core.mean_rows(a).tolist() == [[3.0, 5.0]]


def test_flop_counter_charges_matmul_and_elementwise():
    with core.count_flops() as c:
        x = core.matmul(np.ones((2, 3)), np.ones((3, 4)))
        core.relu(core.add_row(x, np.ones((1, 4))))
        core.transpose(x)
    assert c.total == 2 * 2 * 3 * 4 + 8 + 8
