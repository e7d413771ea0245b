import math
import struct

import numpy as np
import pytest

from semiasr.numerics import tensor as T
from semiasr.numerics.gradcheck import grad_check, leaf
from semiasr.numerics.optim import AdamState, adam_step, clip_by_global_norm
from semiasr.numerics.tensor import NonFiniteError, Tensor, backward, no_grad
from semiasr.selftest import OP_CASES
from semiasr.numerics.tensorio import TensorFormatError, decode_tensor, encode_tensor, load_tensor, save_tensor


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(f64(np.eye(2)), f64(m))
    np.testing.assert_array_equal(out.data, m)


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(f64([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_logsumexp_definition():
    out = T.logsumexp(f64([math.log(2.0), math.log(3.0)]), axis=0)
    assert out.item() == pytest.approx(math.log(5.0), abs=1e-14)


def test_masked_softmax_zeroes_masked_entries():
    out = T.softmax(f64([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]]))
    assert out.data[0, 1] == 0.0
    assert out.data.sum() == pytest.approx(1.0)


@pytest.mark.parametrize(
    "op, args",
    [
        ("matmul", lambda: T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))),
        ("add", lambda: T.add(f64(np.ones((2, 3))), f64(np.ones((4, 3))))),
        ("linear", lambda: T.linear(f64(np.ones((2, 3))), f64(np.ones((4, 2))))),
        ("conv2d", lambda: T.conv2d(f64(np.ones((1, 4, 4, 2))), f64(np.ones((3, 3, 3, 1))))),
    ],
)
def test_shape_mismatch_names_op_and_shapes(op, args):
    with pytest.raises(ValueError) as info:
        args()
    assert op in str(info.value)
    assert "(" in str(info.value)


def test_nonfinite_forward_is_an_error():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(f64([-1.0]))


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        T.dropout(f64([1.0]), 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# backward examples
# ---------------------------------------------------------------------------


def test_backward_square_sum():
    w = leaf([1.0, 2.0])
    backward(T.tsum(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(T.mul(w, w))


def test_constant_graph_gives_zero_gradients():
    w = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(f64([1.0, 2.0]), f64([3.0, 4.0])))
    backward(loss)
    assert w.grad is None  # unreachable leaf: zero gradient


def test_nan_gradient_names_producing_op():
    x = leaf([1e-310])
    loss = T.tsum(T.log(x))
    with pytest.raises(NonFiniteError, match="log"):
        backward(loss)


def test_tape_is_consumed():
    w = leaf([1.0, 2.0])
    y = T.mul(w, w)
    loss = T.tsum(y)
    backward(loss)
    assert loss._backward is None and y._parents == ()


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with no_grad():
        y = T.mul(w, w)
    assert not y.requires_grad


def test_layer_norm_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 5)))
    g = leaf(rng.normal(size=5))
    b = leaf(rng.normal(size=5))
    w = f64(rng.normal(size=(3, 5)))
    rep = grad_check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b}, h=1e-5, tol=1e-4)
    assert rep.passed, str(rep)


# ---------------------------------------------------------------------------
# per-op gradient property: 20 seeds per op, 64-bit, central differences
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng([seed, 11])
    params, fn = OP_CASES[name](rng)
    probe = fn()
    weights = f64(rng.normal(size=probe.shape))
    rep = grad_check(lambda: T.tsum(T.mul(fn(), weights)), params, h=1e-5, tol=1e-4)
    assert rep.passed, f"{name}: {rep}"


@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    out = T.softmax(f64(rng.normal(size=(6, 9)) * 10), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_standardises_rows(seed):
    rng = np.random.default_rng(seed)
    out = T.layer_norm(f64(rng.normal(3.0, 5.0, size=(4, 64)))).data
    assert np.abs(out.mean(-1)).max() <= 1e-6
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-4)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = leaf([1.0, -2.0])
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_moves_by_lr():
    # m_hat = 1, v_hat = 1 after bias correction -> step = lr / (1 + eps)
    p = leaf([0.0])
    state = adam_step({"p": p}, {"p": np.ones(1)}, AdamState(), lr=0.1)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_identical_params_identical_updates():
    a, b = leaf([0.5, 0.1]), leaf([0.5, 0.1])
    state = AdamState()
    for g in ([0.3, -1.0], [0.1, 2.0]):
        adam_step({"a": a, "b": b}, {"a": np.array(g), "b": np.array(g)}, state, lr=0.01)
    np.testing.assert_array_equal(a.data, b.data)
    assert state.step == 2
    assert state.m["a"].shape == a.shape


def test_adam_rejects_bad_inputs():
    p = leaf([0.0, 1.0])
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.ones(3)}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.ones(2)}, AdamState(), lr=0.0)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, rel=1e-9)


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------


def test_grad_check_quadratic_is_exact():
    rng = np.random.default_rng(0)
    a = f64(rng.normal(size=(4, 4)))
    x = leaf(rng.normal(size=(4, 1)))
    rep = grad_check(lambda: T.tsum(T.mul(x, T.matmul(a, x))), {"x": x}, h=1e-5, tol=1e-8)
    assert rep.passed, str(rep)


def test_grad_check_catches_wrong_backward():
    x = leaf([0.5, -1.5, 2.0])

    def broken_square(t):
        return T.custom_op(t.data**2, (t,), lambda g: (g * t.data,), "broken_square")  # should be 2x

    rep = grad_check(lambda: T.tsum(broken_square(x)), {"x": x}, tol=1e-4)
    assert not rep.passed
    assert rep.worst_param == "x" and rep.worst_index is not None
    assert "FAIL" in str(rep)


# ---------------------------------------------------------------------------
# binary tensor format
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("dtype, code", [(np.float32, 0), (np.float64, 1)])
def test_tensor_format_header_and_roundtrip(tmp_path, dtype, code):
    arr = np.arange(6, dtype=dtype).reshape(2, 3)
    buf = encode_tensor(arr)
    assert buf[:4] == b"MPET"
    assert struct.unpack_from("<BBB", buf, 4) == (1, code, 2)
    assert struct.unpack_from("<2Q", buf, 7) == (2, 3)
    path = tmp_path / "t.mpet"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == dtype
    np.testing.assert_array_equal(back, arr)


def test_tensor_format_rejects_garbage():
    with pytest.raises(TensorFormatError):
        decode_tensor(b"NOPE\x01\x00\x00")
    with pytest.raises(TensorFormatError):
        decode_tensor(encode_tensor(np.zeros(3))[:-1])
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros(3, dtype=np.int32))
