"""
Unit tests for the autodiff engine
"""

import math

import numpy as np
import pytest

from slotpolicy import tensor as T
from slotpolicy.errors import NonFiniteError, ShapeError, TapeError
from slotpolicy.gradcheck import grad_check
from slotpolicy.rng import Stream
from slotpolicy.tensor import Tensor

SEEDS = list(range(20))


def _rand(seed, *shape, label="x"):
    return Tensor(Stream(seed).split(label).generator().normal(size=shape), requires_grad=True)


def test_add_suffix_broadcast():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal((a + b).data, [[2.0, 3.0, 4.0]] * 2)


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_dtype_mixing_rejected():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    b.data = b.data.astype(np.float32)
    with pytest.raises(ShapeError, match="dtype"):
        T.add(a, b)


def test_backward_accumulates_through_shared_node():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_tape_consumed_after_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(TapeError, match="consumed"):
        loss.backward()


def test_backward_on_nonscalar_requires_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_nonfinite_from_finite_inputs_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0, 1.0])) * 0.0)


def test_precision_switch():
    T.set_precision("f32")
    assert T.get_precision() == "f32"
    assert Tensor([1.0]).data.dtype == np.float32
    T.set_precision("f64")
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_softmax_rows_sum_to_one():
    x = _rand(0, 4, 5)
    assert np.allclose(T.softmax(x, axis=-1).data.sum(axis=-1), 1.0)


def test_softmax_of_equal_logits_is_uniform():
    out = T.softmax(Tensor(np.zeros(3)), axis=-1).data
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_nll_of_softmax_gradient():
    logits = Tensor(np.zeros(3), requires_grad=True)
    target = Tensor(np.array([1.0, 0.0, 0.0]))
    loss = -T.sum(T.log_softmax(logits, axis=-1) * target)
    loss.backward()
    assert loss.item() == pytest.approx(np.log(3.0))
    assert np.allclose(logits.grad, [-2 / 3, 1 / 3, 1 / 3])


def _gru_scalar(x, h, wi, wh, bi, bh):
    """One-unit GRU written out with math for comparison."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    r = sig(x * wi[0] + bi[0] + h * wh[0] + bh[0])
    z = sig(x * wi[1] + bi[1] + h * wh[1] + bh[1])
    n = math.tanh(x * wi[2] + bi[2] + r * (h * wh[2] + bh[2]))
    return (1.0 - z) * n + z * h


def test_gru_cell_zero_weights_halves_state():
    h = Tensor(np.array([[0.8, -0.4]]))
    zeros = Tensor(np.zeros((3, 6)))
    out = T.gru_cell(Tensor(np.ones((1, 3))), h, zeros, Tensor(np.zeros((2, 6))),
                     Tensor(np.zeros(6)), Tensor(np.zeros(6)))
    assert np.allclose(out.data, [[0.4, -0.2]])


@pytest.mark.parametrize("seed", range(5))
def test_gru_cell_matches_scalar_equations(seed):
    rng = np.random.default_rng(seed)
    x, h = rng.normal(), rng.normal()
    wi, wh, bi, bh = (rng.normal(size=3) for _ in range(4))
    out = T.gru_cell(Tensor(np.array([[x]])), Tensor(np.array([[h]])), Tensor(wi.reshape(1, 3)),
                     Tensor(wh.reshape(1, 3)), Tensor(bi), Tensor(bh))
    assert out.data[0, 0] == pytest.approx(_gru_scalar(x, h, wi, wh, bi, bh), abs=1e-12)


def test_conv2d_identity_kernel():
    x = _rand(1, 1, 5, 5, 2)
    w = np.zeros((3, 3, 2, 2))
    w[1, 1] = np.eye(2)
    out = T.conv2d(x, Tensor(w), pad=1)
    assert np.allclose(out.data, x.data)


def test_conv2d_stride_output_shape():
    out = T.conv2d(_rand(2, 2, 8, 8, 3), _rand(3, 3, 3, 3, 4), stride=2, pad=1)
    assert out.shape == (2, 4, 4, 4)


def test_upsample_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2, 1))
    out = T.upsample(x, 2)
    assert out.shape == (1, 4, 4, 1)
    assert out.data[0, 1, 1, 0] == 0.0 and out.data[0, 3, 3, 0] == 3.0


def test_getitem_rejects_fancy_indexing():
    with pytest.raises(ShapeError):
        _rand(0, 3, 3)[np.array([0, 1])]


def test_take_rows_out_of_range():
    with pytest.raises(ShapeError):
        T.take_rows(_rand(0, 3, 2), [3])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    f = lambda x: T.sum(T.tanh(x) * T.sigmoid(x) + T.softplus(x) * T.exp(x * 0.3) + T.relu(x) / (x * x + 1.0))
    assert grad_check(f, _rand(seed, 3, 4)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul_batched_and_shared(seed):
    w = _rand(seed, 4, 3, label="w")
    b = _rand(seed, 2, 5, 6, label="b").detach()
    x = _rand(seed, 2, 5, 4)
    f = lambda x_: T.sum(T.matmul(x_, w.detach()) * T.matmul(x_, w.detach())) + T.sum(T.matmul(T.transpose(x_, (0, 2, 1)), b))
    assert grad_check(f, x) < 1e-4
    g = lambda w_: T.sum(T.tanh(T.matmul(x.detach(), w_)))
    assert grad_check(g, w) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    w = _rand(seed, 3, 3, 2, 3, label="w")
    bias = _rand(seed, 3, label="bias")
    x = _rand(seed, 2, 6, 6, 2)
    f_x = lambda x_: T.sum(T.tanh(T.conv2d(x_, w.detach(), bias.detach(), stride=2, pad=1)))
    f_w = lambda w_: T.sum(T.tanh(T.conv2d(x.detach(), w_, bias.detach(), stride=1, pad=1)))
    assert grad_check(f_x, x) < 1e-4
    assert grad_check(f_w, w) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_normalisers(seed):
    gain = Tensor(np.linspace(0.5, 1.5, 5))
    bias = Tensor(np.linspace(-0.2, 0.2, 5))
    f = lambda x: (T.sum(T.layernorm(x, gain, bias) * T.softmax(x, axis=0))
                   + T.sum(T.log_softmax(x, axis=-1) * 0.3) + T.sum(T.logsumexp(x, axis=1))
                   + T.sum(T.renormalize(T.exp(x), axis=0, eps=1e-3) * x))
    assert grad_check(f, _rand(seed, 3, 5)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_shape_ops(seed):
    def f(x):
        stacked = T.concat([x[:, :2], T.reshape(x, (6, 2))[:2] * 2.0], axis=0)
        spread = T.mean(T.expand(x, 0, 2), axis=0)[:, 1:]
        image = T.upsample(T.reshape(x, (1, 2, 2, 3)), 2)
        return T.sum(stacked * stacked) + T.sum(T.sigmoid(spread)) + T.sum(T.tanh(image) * 0.5)
    assert grad_check(f, _rand(seed, 4, 3)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gru_cell(seed):
    d = 3
    h = _rand(seed, 2, d, label="h").detach()
    w_ih = _rand(seed, 4, 3 * d, label="wi").detach()
    w_hh = _rand(seed, d, 3 * d, label="wh").detach()
    b = Tensor(np.zeros(3 * d))
    f = lambda x: T.sum(T.gru_cell(x, h, w_ih, w_hh, b, b))
    assert grad_check(f, _rand(seed, 2, 4)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_take_rows(seed):
    f = lambda table: T.sum(T.tanh(T.take_rows(table, [0, 2, 2, 1])))
    assert grad_check(f, _rand(seed, 3, 4)) < 1e-4


def test_grad_check_requires_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, _rand(0, 3))


def test_grad_check_requires_f64():
    x = _rand(0, 2)
    T.set_precision("f32")
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), x)


def test_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert T.global_norm([a, b]) == pytest.approx(5.0)
