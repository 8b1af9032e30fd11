import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrldial import autodiff as ad
from ctrldial.autodiff import Tensor
from ctrldial.errors import ConfigError, ContractError, DimensionError, NumericError

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
# central differences at h=1e-5 cannot resolve gradients much below 1e-6, so
# inputs that enter a product as the "other" factor stay clear of zero
resolvable = finite.filter(lambda v: abs(v) > 0.05)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- forward values ---------------------------------------------------------
def test_matmul_identity_and_hand_case():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(arrays(np.float64, (3, 4), elements=finite))
def test_identity_matmul_is_bitwise(x):
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(x)).data, x)


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)
    assert ad.softmax(Tensor([1000.0, 0.0])).data.tolist() == [1.0, 0.0]


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        ad.softmax(Tensor(np.zeros((2, 0))))


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all(p > 0) or np.ptp(x) > 30  # exp underflow is the only way to hit zero


def test_layer_norm_examples():
    ones, zeros = np.ones(3), np.zeros(3)
    assert np.allclose(ad.layer_norm(Tensor([[1.0, 1.0, 1.0]]), ones, zeros).data, 0.0)
    out = ad.layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)
    shifted = ad.layer_norm(Tensor([[4.0, -2.0, 7.0]]), np.zeros(3), np.full(3, 5.0)).data
    assert np.array_equal(shifted, [[5.0, 5.0, 5.0]])


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ConfigError):
        ad.layer_norm(Tensor([[1.0, 2.0]]), np.ones(2), np.zeros(2), eps=0.0)


@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_standardises(x):
    x = x + np.arange(6) * 0.5  # keeps rows away from constant
    out = ad.layer_norm(Tensor(x), np.ones(6), np.zeros(6), eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_activations():
    assert ad.activation(Tensor([-1.0, 0.0, 2.0]), "relu").data.tolist() == [0.0, 0.0, 2.0]
    assert ad.activation(Tensor(0.0), "sigmoid").item() == 0.5
    assert abs(ad.activation(Tensor(1.0), "tanh").item() - 0.76159) < 1e-5
    with pytest.raises(ConfigError):
        ad.activation(Tensor(1.0), "gelu")


def test_cross_entropy_examples():
    assert ad.cross_entropy(Tensor([[0.0, 1.0, 0.0]]), [1], kind="probs").item() == 0.0
    assert abs(ad.cross_entropy(Tensor(np.full((2, 4), 0.25)), [0, 3], kind="probs").item() - math.log(4)) < 1e-12
    assert abs(ad.cross_entropy(Tensor([[1.0, 2.0]]), [1]).item() - 0.31326) < 1e-5
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([[1.0, 2.0]]), [2])


def test_cross_entropy_weights_mask_rows():
    logits = np.array([[1.0, 2.0], [5.0, -1.0]])
    masked = ad.cross_entropy(Tensor(logits), [1, 1], weights=[1.0, 0.0]).item()
    assert masked == ad.cross_entropy(Tensor(logits[:1]), [1]).item()


# -- backward ---------------------------------------------------------------
def test_backward_examples():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3)))
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = leaf([1.0, 2.0])
    ad.backward((y * y).sum())
    assert y.grad.tolist() == [2.0, 4.0]
    a, b = leaf([1.0]), leaf([3.0])
    ad.backward((a * 2.0).sum())
    assert b.grad.tolist() == [0.0]


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    w0, x = rng.normal(size=(4, 3)), rng.normal(size=(6, 4))
    grads = []
    for _ in range(2):
        w = leaf(w0)
        ad.backward(ad.cross_entropy(Tensor(x) @ w, [0, 1, 2, 0, 1, 2]))
        grads.append(w.grad)
    assert np.array_equal(*grads)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0, 1.0]))


# -- grad_check -------------------------------------------------------------
def test_grad_check_quadratic_and_constant():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3))
    a = a @ a.T
    x = leaf(rng.normal(size=(3, 1)))
    assert ad.grad_check(lambda: (x.transpose(1, 0) @ Tensor(a) @ x).sum(), [x]) < 1e-6
    c = leaf([1.0, 2.0])
    assert ad.grad_check(lambda: Tensor(3.0) + c.sum() * 0.0, [c]) == 0.0


def test_grad_check_softmax_cross_entropy():
    z = leaf(np.random.default_rng(3).normal(size=(3, 5)))
    assert ad.grad_check(lambda: ad.cross_entropy(z, [0, 4, 2]), [z]) < 1e-4


def test_grad_check_rejects_non_finite():
    x = leaf([0.0])
    with pytest.raises(NumericError):
        ad.grad_check(lambda: ad.log(x).sum(), [x])


_UNARY = {
    "exp": lambda a: a.exp(), "log": lambda a: (a + 3.0).log(), "relu": lambda a: a.relu(),
    "tanh": lambda a: a.tanh(), "sigmoid": lambda a: a.sigmoid(), "neg": lambda a: -a,
    "pow": lambda a: ad.power(a + 3.0, 1.5), "mean": lambda a: a.mean(axis=0, keepdims=True),
    "transpose": lambda a: a.transpose(1, 0), "reshape": lambda a: a.reshape(-1),
    "getitem": lambda a: a[1:, ::2], "softmax": lambda a: ad.softmax(a),
    "log_softmax": lambda a: ad.log_softmax(a), "swapaxes": lambda a: a.swapaxes(0, 1),
    "causal_softmax": lambda a: ad.softmax(a[:, :3], np.tril(np.ones((3, 3), dtype=bool))),
}
_BINARY = {
    "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b + 3.0), "matmul": lambda a, b: a @ b.transpose(1, 0),
    "concat": lambda a, b: ad.concat([a, b], axis=0), "stack": lambda a, b: ad.stack([a, b], axis=1),
    "broadcast_add": lambda a, b: a + b[0],
}


@pytest.mark.parametrize("name", sorted(_UNARY))
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_unary_op_gradients(name, x):
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # kink
    p = leaf(x)
    w = Tensor(np.random.default_rng(0).normal(size=_UNARY[name](Tensor(x)).shape))
    assert ad.grad_check(lambda: (_UNARY[name](p) * w).sum(), [p]) < 1e-4


@pytest.mark.parametrize("name", sorted(_BINARY))
@given(x=arrays(np.float64, (3, 4), elements=resolvable), y=arrays(np.float64, (3, 4), elements=resolvable))
def test_binary_op_gradients(name, x, y):
    a, b = leaf(x), leaf(y)
    w = Tensor(np.random.default_rng(1).normal(size=_BINARY[name](Tensor(x), Tensor(y)).shape))
    assert ad.grad_check(lambda: (_BINARY[name](a, b) * w).sum(), [a, b]) < 1e-4


@given(x=arrays(np.float64, (4, 5), elements=finite))
def test_layer_norm_gradient(x):
    rng = np.random.default_rng(4)
    p, s, h = leaf(x + np.arange(5)), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = Tensor(rng.normal(size=(4, 5)))
    assert ad.grad_check(lambda: (ad.layer_norm(p, s, h) * w).sum(), [p, s, h]) < 1e-4


@given(x=arrays(np.float64, (4, 3), elements=finite))
def test_cross_entropy_probs_gradient(x):
    p = leaf(x)
    assert ad.grad_check(lambda: ad.cross_entropy(ad.softmax(p), [0, 1, 2, 1], kind="probs",
                                                  weights=[1.0, 0.5, 0.0, 2.0]), [p]) < 1e-4
