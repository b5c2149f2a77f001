import numpy as np
import pytest

from greedyprune.numeric import (RngStream, activate, activate_grad, elementwise, matmul,
                                 sample_matrix)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_hand_cases():
    assert matmul([[1, 0], [0, 1]], [[3], [4]]).tolist() == [[3], [4]]
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]


def test_matmul_matches_triple_loop():
    rng = RngStream(11)
    a, b = rng.gauss((7, 5)), rng.gauss((5, 3))
    # five-term dot products: BLAS and the loop agree to the last ulp or two
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-14)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_sample_matrix_is_reproducible():
    a = sample_matrix(RngStream(7), 2, 2, "uniform01")
    b = sample_matrix(RngStream(7), 2, 2, "uniform01")
    assert np.array_equal(a, b)


def test_sample_matrix_advances_stream():
    rng = RngStream(7)
    assert not np.array_equal(sample_matrix(rng, 2, 2), sample_matrix(rng, 2, 2))


def test_sample_moments():
    u = sample_matrix(RngStream(1), 100, 100, "uniform01")
    g = sample_matrix(RngStream(2), 100, 100, "gauss01")
    assert abs(u.mean() - 0.5) <= 0.02
    assert abs(g.var() - 1.0) <= 0.05


def test_sample_matrix_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_matrix(RngStream(0), 0, 3)
    with pytest.raises(ValueError):
        sample_matrix(RngStream(0), 2, 3, "cauchy")


def test_child_streams_are_independent_of_call_order():
    root = RngStream(3)
    first = root.child("data").uniform(4)
    root.child("other").uniform(100)
    again = RngStream(3).child("data").uniform(4)
    assert np.array_equal(first, again)
    assert not np.array_equal(root.child("data").uniform(4), root.child("date").uniform(4))


def test_long_string_tags_do_not_collide():
    a = RngStream(0).child("identity-tail").uniform(3)
    b = RngStream(0).child("identity-tails").uniform(3)
    assert not np.array_equal(a, b)


def test_elementwise_definitions():
    assert elementwise("relu", [-1, 0, 2]).tolist() == [0, 0, 2]
    assert elementwise("tanh", [0]).tolist() == [0]
    assert elementwise("relu_grad", [-1, 0, 2]).tolist() == [0, 0, 1]
    assert elementwise("linear", [-1.5, 2]).tolist() == [-1.5, 2]
    assert elementwise("linear_grad", [-1.5, 2]).tolist() == [1, 1]
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(activate_grad("tanh", x), 1 - np.tanh(x) ** 2)
    np.testing.assert_array_equal(activate("relu", x), np.maximum(x, 0))


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        elementwise("sigmoid", [0.0])
