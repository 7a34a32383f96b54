import math

import numpy as np
import pytest

from dpcompress import tensor as T
from gradcases import CASES


def test_matmul_identity_and_hand_example():
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(np.eye(2), X).data, X)
    assert np.array_equal(T.matmul([[1, 2], [3, 4]], [[1], [1]]).data, [[3], [7]])


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_cross_entropy_uniform_and_limit():
    assert T.cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0])).item() == pytest.approx(math.log(3), abs=1e-15)
    assert T.cross_entropy(np.array([[500.0, 0.0, 0.0]]), np.array([0])).item() < 1e-200


def test_cross_entropy_bad_targets():
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        T.cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_soft_cross_entropy_of_own_softmax_is_entropy():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 4))
    p = T.softmax(z).data
    ent = -(p * np.log(p)).sum(axis=1).mean()
    assert T.soft_cross_entropy(p, z).item() == pytest.approx(ent, rel=1e-13)


def test_soft_cross_entropy_one_hot_equals_cross_entropy():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    assert T.soft_cross_entropy(np.eye(3)[y], z).item() == pytest.approx(T.cross_entropy(z, y).item(), rel=1e-14)


def test_soft_cross_entropy_rejects_non_distributions():
    with pytest.raises(ValueError):
        T.soft_cross_entropy(np.full((1, 3), 0.5), np.zeros((1, 3)))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    for seed in range(10):
        assert CASES[name](seed) < 1e-4


def test_tensors_are_immutable():
    src = np.ones((2, 2))
    t = T.Tensor(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 2.0


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        T.scale(np.array([1e308]), 10.0)


def test_diamond_graph_accumulates():
    x = T.Tensor(np.array([[1.5, -2.0]]), True)
    y = T.mul(x, x)
    z = T.add(y, x)
    T.matmul(z, np.ones((2, 1))).backward()
    assert np.array_equal(x.grad, 2 * x.data + 1)


def test_constants_get_no_grad():
    x = T.Tensor(np.ones((2, 2)), True)
    c = T.Tensor(np.ones((2, 2)))
    out = T.matmul(T.mul(x, c), np.ones((2, 1)))
    T.matmul(np.ones((1, 2)), out).backward()
    assert c.grad is None and x.grad is not None
    assert not T.matmul(c, c).requires_grad


def test_backward_requires_scalar_or_seed():
    x = T.Tensor(np.ones((2, 2)), True)
    with pytest.raises(ValueError):
        T.scale(x, 2.0).backward()
    with pytest.raises(RuntimeError):
        T.Tensor(1.0).backward()
