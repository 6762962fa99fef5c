"""Reverse-mode tape: op gradients, graph lifecycle and numeric guards."""
import numpy as np
import pytest

from mamba_moc import autograd as ag
from mamba_moc.autograd import Tensor
from mamba_moc.errors import GraphStateError, NumericError

from _helpers import check_gradients


def leaf(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, size=shape) if low is not None else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def weighted_sum(y, rng_seed=0):
    w = np.random.default_rng(rng_seed).normal(size=y.shape)
    return ag.sum_(ag.mul(y, Tensor(w, dtype=np.float64)))


UNARY = {
    "exp": ag.exp,
    "sigmoid": ag.sigmoid,
    "silu": ag.silu,
    "softplus": ag.softplus,
    "neg": ag.neg,
    "mean_axis": lambda t: ag.mean(t, axis=1, keepdims=True),
    "sum_axis": lambda t: ag.sum_(t, axis=0),
    "transpose": lambda t: ag.transpose(t, (1, 0)),
    "reshape": lambda t: ag.reshape(t, (12,)),
    "slice": lambda t: ag.slice_(t, (slice(1, 3), slice(None, None, 2))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng, 3, 4)
    check_gradients(lambda: weighted_sum(UNARY[name](x)), [x])


def test_relu_gradient_away_from_kink(rng):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, (3, 4)),
               requires_grad=True, dtype=np.float64)
    check_gradients(lambda: weighted_sum(ag.relu(x)), [x])


@pytest.mark.parametrize("op", [ag.add, ag.sub, ag.mul, ag.div])
def test_binary_broadcast_gradients(op, rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 3, 1, low=0.5, high=2.0)
    check_gradients(lambda: weighted_sum(op(a, b)), [a, b])


def test_matmul_and_bmm_gradients(rng):
    a = leaf(rng, 2, 5, 3)
    w = leaf(rng, 3, 4)
    check_gradients(lambda: weighted_sum(ag.matmul(a, w)), [a, w])
    wb = leaf(rng, 2, 3, 4)
    check_gradients(lambda: weighted_sum(ag.bmm(a, wb)), [a, wb])


def test_concat_split_einsum_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 5)
    check_gradients(lambda: weighted_sum(ag.concat([a, b], axis=-1)), [a, b])
    parts = lambda: ag.split(ag.concat([a, b], axis=-1), [4, 4])
    check_gradients(lambda: ag.add(weighted_sum(parts()[0], 1), weighted_sum(parts()[1], 2)), [a, b])
    c = leaf(rng, 3, 4)
    check_gradients(lambda: weighted_sum(ag.einsum("ij,jk->ik", a, c)), [a, c])


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 4)
    check_gradients(lambda: ag.sum_(ag.mul(ag.exp(x), ag.exp(x))), [x])


def test_sigmoid_and_softplus_are_stable():
    x = Tensor([-1000.0, 0.0, 1000.0], dtype=np.float64)
    np.testing.assert_allclose(ag.sigmoid(x).data, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(ag.softplus(x).data, [0.0, np.log(2.0), 1000.0])


def test_second_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ag.sum_(ag.mul(x, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    with pytest.raises(GraphStateError):
        loss.backward()


def test_non_scalar_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        ag.mul(x, x).backward()


def test_leaf_gradients_accumulate_across_graphs():
    x = Tensor([3.0], requires_grad=True)
    ag.sum_(ag.mul(x, 2.0)).backward()
    ag.sum_(ag.mul(x, 5.0)).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_non_finite_output_raises():
    x = Tensor([1e30], dtype=np.float32)
    with pytest.raises(NumericError):
        ag.exp(x)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad and y.is_leaf
    assert ag.is_grad_enabled()


def test_default_dtype_is_float32_and_scoped():
    assert Tensor([1.0]).dtype == np.float32
    with ag.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    np.testing.assert_array_equal(ag.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))
    np.testing.assert_array_equal(ag.unbroadcast(g, ()), 24.0)
