"""Engine tests: hand-computed forwards plus finite-difference gradient checks."""

import numpy as np
import numpy.testing as npt
import pytest

from tafusion import tensor as tz
from tafusion.tensor import NonFiniteError, ShapeError, Tensor

from tests.helpers import finite_difference, rel_error

GRAD_TOL = 1e-5


def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (3, 3))
    out = tz.matmul(Tensor(np.eye(3)), Tensor(x))
    npt.assert_array_equal(out.data, x)


def test_matmul_hand_computed():
    out = tz.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    npt.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        tz.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_symmetry():
    out = tz.softmax(Tensor([[0.0, 0.0, 0.0]]), axis=1)
    npt.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_softmax_stabilized():
    out = tz.softmax(Tensor([[1000.0, 0.0]]), axis=1)
    assert np.isfinite(out.data).all()
    npt.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-50, 50, (6, 7))
    out = tz.softmax(Tensor(x), axis=1)
    npt.assert_allclose(out.data.sum(axis=1), np.ones(6), rtol=0, atol=1e-12)
    assert (out.data >= 0).all()
    out0 = tz.softmax(Tensor(x), axis=0)
    npt.assert_allclose(out0.data.sum(axis=0), np.ones(7), rtol=0, atol=1e-12)


def test_layer_norm_constant_row_gives_zeros():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = tz.layer_norm(Tensor(np.full((2, 4), 3.7)), g, b)
    npt.assert_array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_standardizes():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = tz.layer_norm(Tensor([[1.0, 2.0, 3.0]]), g, b)
    assert abs(out.data.mean()) < 1e-12
    assert abs(out.data.var() - 1.0) < 1e-4


def test_nonfinite_creation_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_nonfinite_op_output_rejected():
    big = Tensor([[1e308]])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        tz.mul(big, big)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = tz.scale(x, 2.0)
    with pytest.raises(ValueError):
        tz.backward(y)


def test_loss_gradient_seeds_at_one():
    x = Tensor(5.0, requires_grad=True)
    loss = tz.scale(x, 1.0)
    tz.backward(loss)
    assert loss.grad == 1.0
    assert x.grad == 1.0


def test_gradient_accumulates_across_uses():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = tz.sum_all(tz.add(x, x))
    tz.backward(loss)
    npt.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_backward_twice_accumulates_additively():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    tz.backward(tz.sum_all(x))
    tz.backward(tz.sum_all(x))
    npt.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_composition_determinism():
    def run():
        rng = np.random.default_rng(123)
        a = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
        loss = tz.sum_all(tz.gelu(tz.softmax(tz.matmul(a, b), axis=1)))
        tz.backward(loss)
        return loss.data.copy(), a.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


# --------------------------------------------------------------------------
# gradient checks: every primitive against central finite differences


def _check_grads(build, arrays, tol=GRAD_TOL):
    """build(tensors) -> scalar Tensor; arrays are the leaf values."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    tz.backward(loss)

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    fd = finite_difference(f, [a.copy() for a in arrays])
    for leaf, g in zip(leaves, fd):
        assert rel_error(leaf.grad, g) < tol


def _rand(rng, *shape):
    return rng.uniform(-2, 2, shape)


def _weighted_sum(rng, shape):
    r = rng.uniform(-1, 1, shape)
    return lambda t: tz.sum_all(tz.mul_const(t, r))


@pytest.mark.parametrize("seed", range(3))
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    w = _weighted_sum(rng, (5, 3))
    _check_grads(lambda ts: w(tz.matmul(ts[0], ts[1])),
                 [_rand(rng, 5, 4), _rand(rng, 4, 3)], tol=1e-6)


@pytest.mark.parametrize("axis", [0, 1])
def test_grad_softmax(axis):
    rng = np.random.default_rng(7)
    w = _weighted_sum(rng, (4, 5))
    _check_grads(lambda ts: w(tz.softmax(ts[0], axis=axis)), [_rand(rng, 4, 5)], tol=1e-6)


@pytest.mark.parametrize("axis", [0, 1])
def test_grad_log_softmax(axis):
    rng = np.random.default_rng(8)
    w = _weighted_sum(rng, (4, 5))
    _check_grads(lambda ts: w(tz.log_softmax(ts[0], axis=axis)), [_rand(rng, 4, 5)])


def test_grad_layer_norm():
    rng = np.random.default_rng(9)
    w = _weighted_sum(rng, (3, 6))
    _check_grads(lambda ts: w(tz.layer_norm(ts[0], ts[1], ts[2])),
                 [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)], tol=1e-6)


def test_grad_gelu():
    rng = np.random.default_rng(10)
    w = _weighted_sum(rng, (4, 4))
    _check_grads(lambda ts: w(tz.gelu(ts[0])), [_rand(rng, 4, 4)])


def test_grad_l2norm_rows():
    rng = np.random.default_rng(11)
    w = _weighted_sum(rng, (3, 5))
    _check_grads(lambda ts: w(tz.l2norm_rows(ts[0])), [_rand(rng, 3, 5)])


def test_grad_rope_pairs():
    rng = np.random.default_rng(12)
    angles = rng.uniform(0, 6, (4, 3))
    cos, sin = np.cos(angles), np.sin(angles)
    w = _weighted_sum(rng, (4, 6))
    _check_grads(lambda ts: w(tz.rope_pairs(ts[0], cos, sin)), [_rand(rng, 4, 6)])


def test_grad_add_bias_row():
    rng = np.random.default_rng(13)
    w = _weighted_sum(rng, (5, 3))
    _check_grads(lambda ts: w(tz.add(ts[0], ts[1])), [_rand(rng, 5, 3), _rand(rng, 3)])


def test_grad_elementwise_and_reshape_ops():
    rng = np.random.default_rng(14)
    w = _weighted_sum(rng, (5, 2))

    def build(ts):
        a, b = ts
        x = tz.mul(a, b)
        x = tz.sub(x, tz.neg(a))
        x = tz.concat_rows([tz.slice_rows(x, 0, 2), tz.slice_rows(x, 1, 4)])
        x = tz.concat_cols([tz.slice_cols(x, 0, 1), tz.slice_cols(x, 2, 3)])
        return w(tz.transpose(tz.transpose(x)))

    _check_grads(build, [_rand(rng, 4, 4), _rand(rng, 4, 4)])


def test_grad_mean_rows_and_scale():
    rng = np.random.default_rng(15)
    w = _weighted_sum(rng, (1, 4))
    _check_grads(lambda ts: w(tz.scale(tz.mean_rows(ts[0]), 2.5)), [_rand(rng, 6, 4)])


def test_add_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        tz.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        tz.mul(Tensor(np.ones((3, 4))), Tensor(np.ones(4)))
