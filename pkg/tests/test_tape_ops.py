import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sifdal import ops
from sifdal.errors import ConfigurationError, ContractError, DimensionError, NumericError
from sifdal.gradcheck import check_gradients
from sifdal.tape import Tape, backward


def scalar_program(op):
    """Random linear read-out turns any op into a scalar for gradient checks."""
    def f(tape):
        y = op(tape)
        r = np.random.default_rng(7).normal(size=y.shape)
        return ops.sum(ops.mul(y, r))
    return f


def test_matmul_identity_and_hand_values():
    t = Tape()
    out = ops.matmul(t.const(np.eye(2)), t.const([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])
    out = ops.matmul(t.const([[1.0, 2.0]]), t.const([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    t = Tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(t.const(np.zeros((2, 3))), t.const(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 3))}
    rep = check_gradients(lambda t: ops.sum(ops.matmul(t.param("a"), t.param("b"))), params, names=["a"])
    assert rep.passed and rep.max_rel_error <= 1e-6


def test_conv_zero_kernels_give_zero(rng):
    t = Tape()
    out = ops.conv2d(t.const(rng.normal(size=(2, 5, 5))), t.const(np.zeros((3, 2, 3, 3))))
    assert out.shape == (3, 5, 5)
    assert not out.value.any()


@pytest.mark.parametrize("channel", [0, 1])
def test_conv_delta_kernel_is_identity(rng, channel):
    x = rng.normal(size=(2, 6, 7))
    k = np.zeros((1, 2, 3, 3))
    k[0, channel, 1, 1] = 1.0
    t = Tape()
    out = ops.conv2d(t.const(x), t.const(k))
    np.testing.assert_array_equal(out.value[0], x[channel])


@pytest.mark.parametrize("h,w,stride,expect", [(5, 5, 2, (3, 3)), (8, 8, 2, (4, 4)), (7, 4, 1, (7, 4))])
def test_conv_output_size_is_ceil(h, w, stride, expect, rng):
    t = Tape()
    out = ops.conv2d(t.const(rng.normal(size=(1, h, w))), t.const(rng.normal(size=(2, 1, 3, 3))), stride)
    assert out.shape[1:] == expect


def test_conv_channel_mismatch():
    t = Tape()
    with pytest.raises(DimensionError):
        ops.conv2d(t.const(np.zeros((2, 5, 5))), t.const(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(rng, stride):
    params = {"x": rng.normal(size=(2, 5, 5)), "k": rng.normal(size=(3, 2, 3, 3))}
    f = scalar_program(lambda t: ops.conv2d(t.param("x"), t.param("k"), stride))
    rep = check_gradients(f, params)
    assert rep.passed and rep.max_rel_error <= 1e-5, rep


def test_conv_batched_matches_per_image(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    k = rng.normal(size=(4, 2, 3, 3))
    t = Tape()
    batched = ops.conv2d(t.const(x), t.const(k), 2).value
    for i in range(3):
        np.testing.assert_allclose(batched[i], ops.conv2d(t.const(x[i]), t.const(k), 2).value, atol=1e-12)


def test_split_channels_routing():
    x = np.stack([np.full((2, 2), c, dtype=float) for c in range(4)])
    t = Tape({"x": x})
    a, b = ops.split_channels(t.param("x"))
    assert set(np.unique(a.value)) == {0.0, 1.0}
    assert set(np.unique(b.value)) == {2.0, 3.0}
    g = backward(t, ops.sum(a))["x"]
    np.testing.assert_array_equal(g[:2], 1.0)
    np.testing.assert_array_equal(g[2:], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_split_concat_round_trip_bitwise(half, batch, hw, seed):
    x = np.random.default_rng(seed).normal(size=(batch, 2 * half, hw, hw))
    t = Tape()
    a, b = ops.split_channels(t.const(x))
    assert ops.concat_channels(a, b).value.tobytes() == x.tobytes()


def test_split_odd_channels():
    t = Tape()
    with pytest.raises(ConfigurationError):
        ops.split_channels(t.const(np.zeros((3, 2, 2))))


def test_grad_reverse(rng):
    x = rng.normal(size=(3, 2))
    t = Tape({"x": x})
    y = ops.grad_reverse(t.param("x"), 1.0)
    np.testing.assert_array_equal(y.value, x)
    g = backward(t, ops.sum(ops.mul(y, 2.0)))["x"]
    np.testing.assert_array_equal(g, -2.0)

    t = Tape({"x": x})
    y = ops.grad_reverse(ops.grad_reverse(t.param("x"), 1.0), 1.0)
    np.testing.assert_array_equal(backward(t, ops.sum(ops.mul(y, 2.0)))["x"], 2.0)
    with pytest.raises(ContractError):
        ops.grad_reverse(t.param("x"), 0.0)


def test_backward_linear_and_frozen():
    t = Tape({"p": np.arange(6.0).reshape(2, 3), "q": np.ones(3)}, trainable={"q": False})
    loss = ops.sum(t.param("p")) + ops.sum(t.param("q"))
    grads = backward(t, loss)
    np.testing.assert_array_equal(grads["p"], np.ones((2, 3)))
    assert "q" not in grads


def test_backward_requires_scalar():
    t = Tape({"p": np.ones(3)})
    with pytest.raises(ContractError):
        backward(t, t.param("p"))


def test_gradient_accumulates_over_uses():
    t = Tape({"x": np.array(1.5)})
    x = t.param("x")
    assert backward(t, x + x)["x"] == 2.0


def test_unused_trainable_gets_zero_entry():
    t = Tape({"a": np.ones(2), "b": np.ones(3)})
    grads = backward(t, ops.sum(t.param("a")))
    np.testing.assert_array_equal(grads["b"], np.zeros(3))


def test_polynomial_and_relu_kink():
    rep = check_gradients(lambda t: ops.square(t.param("x")), {"x": np.array(3.0)})
    assert rep.passed and rep.max_rel_error < 1e-6
    rep = check_gradients(lambda t: ops.relu(t.param("x")), {"x": np.array(0.0)})
    assert rep.excluded == [("x", ())]
    assert rep.checked == 0


def test_gradcheck_rejects_nonfinite_and_bad_step():
    with pytest.raises(NumericError, match=r"x\[0\]"), np.errstate(invalid="ignore"):
        check_gradients(lambda t: ops.sum(ops.log(t.param("x"))), {"x": np.array([1e-6])}, h=1e-5)
    with pytest.raises(ContractError):
        check_gradients(lambda t: ops.sum(t.param("x")), {"x": np.ones(1)}, h=1e-2)


UNARY = {
    "relu": ops.relu,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "exp": ops.exp,
    "square": ops.square,
    "neg": ops.neg,
    "softmax": lambda x: ops.softmax(x, axis=1),
    "log_softmax": lambda x: ops.log_softmax(x, axis=0),
    "mean_axis": lambda x: ops.mean(x, axis=1),
    "sum_axis": lambda x: ops.sum(x, axis=(0, 2), keepdims=True),
    "global_avg_pool": ops.global_avg_pool,
    "max_pool2": ops.max_pool2,
    "upsample2": ops.upsample2,
    "transpose": lambda x: ops.transpose(x, (2, 0, 1)),
    "reshape": lambda x: ops.reshape(x, (-1,)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name, rng):
    op = UNARY[name]
    rep = check_gradients(scalar_program(lambda t: op(t.param("x"))), {"x": rng.normal(size=(2, 4, 4))})
    assert rep.passed, rep
    assert rep.checked > 0


def test_positive_domain_primitives(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    for op in (ops.log, ops.sqrt):
        rep = check_gradients(scalar_program(lambda t: op(t.param("x"))), {"x": x})
        assert rep.passed, (op, rep)


@pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul, ops.div])
def test_broadcasting_binary_gradients(op, rng):
    params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.uniform(0.5, 2.0, size=(3, 1))}
    rep = check_gradients(scalar_program(lambda t: op(t.param("a"), t.param("b"))), params)
    assert rep.passed, rep


def test_spatial_primitives_gradients(rng):
    params = {"x": rng.normal(size=(2, 4, 3, 3)), "y": rng.normal(size=(2, 2, 3, 3)),
              "w": rng.normal(size=(5, 4)), "b": rng.normal(size=5)}
    def prog(t):
        z = ops.add_channel_bias(ops.conv1x1(t.param("x"), t.param("w")), t.param("b"))
        return ops.concat_channels(z, t.param("y"))
    rep = check_gradients(scalar_program(prog), params)
    assert rep.passed, rep


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 4, 4)
    t = Tape()
    np.testing.assert_array_equal(ops.max_pool2(t.const(x)).value, [[[5, 7], [13, 15]]])
    np.testing.assert_array_equal(ops.upsample2(t.const([[[1.0]]])).value, np.ones((1, 2, 2)))


def test_three_layer_network_passes_gradcheck(rng):
    params = {"w1": rng.normal(size=(4, 6)), "w2": rng.normal(size=(6, 5)), "w3": rng.normal(size=(5, 3))}
    x = rng.normal(size=(8, 4))
    labels = rng.integers(0, 3, size=8)
    onehot = np.eye(3)[labels]

    def f(t):
        h = ops.relu(ops.matmul(t.const(x), t.param("w1")))
        h = ops.sigmoid(ops.matmul(h, t.param("w2")))
        logp = ops.log_softmax(ops.matmul(h, t.param("w3")), axis=1)
        return ops.neg(ops.mean(ops.sum(ops.mul(logp, onehot), axis=1)))

    rep = check_gradients(f, params, tol=1e-4)
    assert rep.passed, rep


def test_determinism_bitwise(rng):
    params = {"x": rng.normal(size=(1, 2, 6, 6)), "k": rng.normal(size=(3, 2, 3, 3))}

    def run():
        t = Tape(params)
        y = ops.relu(ops.conv2d(t.param("x"), t.param("k"), 2))
        loss = ops.sum(ops.square(y))
        g = backward(t, loss)
        return loss.value.tobytes(), g["x"].tobytes(), g["k"].tobytes()

    assert run() == run()


def test_values_are_read_only(rng):
    t = Tape({"x": rng.normal(size=3)})
    y = ops.relu(t.param("x"))
    with pytest.raises(ValueError):
        y.value[0] = 1.0
