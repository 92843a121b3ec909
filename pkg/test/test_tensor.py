import numpy as np
import pytest
from debiaser.tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    backward,
    bce_loss,
    concat_channels,
    conv2d,
    elementwise,
    finite_difference_check,
    gradient_check,
    maxpool2d,
    mse_loss,
    mul,
    relu,
    reshape,
    scale,
    select_column,
    sigmoid,
    sub,
    tensor_sum,
    upsample_nearest,
)

TOL = 1e-4


def rng(seed):
    return np.random.default_rng(seed)


def grad_of_sum(op, x):
    tape = Tape()
    out = op(tape.watch("x", np.asarray(x, dtype=np.float64)))
    return backward(tensor_sum(out), tape)["x"]


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf])


def test_tensor_is_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_conv_identity_kernel():
    x = rng(0).random((2, 1, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_hand_example():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 45
    assert out.data[0, 0, 0, 0] == 12


def test_conv_zero_input_gives_bias():
    w = rng(1).normal(size=(3, 2, 3, 3))
    out = conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(w), Tensor([0.5, -1.0, 2.0]), padding=1)
    for c, b in enumerate([0.5, -1.0, 2.0]):
        np.testing.assert_allclose(out.data[0, c], b)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_maxpool_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert maxpool2d(Tensor(x)).data.tolist() == [[[[4.0]]]]
    np.testing.assert_array_equal(grad_of_sum(maxpool2d, x), [[[[0, 0], [0, 1]]]])
    constant = np.full((1, 2, 4, 4), 3.0)
    np.testing.assert_array_equal(maxpool2d(Tensor(constant)).data, np.full((1, 2, 2, 2), 3.0))


def test_maxpool_tie_routes_to_first():
    np.testing.assert_array_equal(grad_of_sum(maxpool2d, np.ones((1, 1, 2, 2))), [[[[1, 0], [0, 0]]]])


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(upsample_nearest(Tensor(x)).data[0, 0], expected)
    np.testing.assert_array_equal(grad_of_sum(upsample_nearest, x), np.full(x.shape, 4.0))


def test_concat_channels():
    a, b = rng(2).random((1, 1, 2, 2)), rng(3).random((1, 1, 2, 2))
    out = concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out.data[:, :1], a)
    np.testing.assert_array_equal(out.data[:, 1:], b)
    empty = np.zeros((1, 0, 2, 2))
    np.testing.assert_array_equal(concat_channels(Tensor(a), Tensor(empty)).data, a)


def test_concat_gradient_split():
    tape = Tape()
    a = tape.watch("a", rng(4).random((2, 1, 2, 2)))
    b = tape.watch("b", rng(5).random((2, 3, 2, 2)))
    weights = rng(6).random((2, 4, 2, 2))
    grads = backward(tensor_sum(mul(concat_channels(a, b), Tensor(weights))), tape)
    np.testing.assert_array_equal(grads["a"], weights[:, :1])
    np.testing.assert_array_equal(grads["b"], weights[:, 1:])


def test_affine_examples():
    x = rng(7).random((3, 4))
    np.testing.assert_array_equal(affine(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = affine(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
    assert out.data.tolist() == [[6.0]]

    tape = Tape()
    bias = tape.watch("bias", np.zeros(2))
    grads = backward(tensor_sum(affine(Tensor(np.ones((5, 3))), Tensor(np.ones((3, 2))), bias)), tape)
    np.testing.assert_array_equal(grads["bias"], [5.0, 5.0])


def test_elementwise_examples():
    assert elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = rng(8).random(5)
    np.testing.assert_array_equal(elementwise("add", Tensor(x), Tensor(np.zeros(5))).data, x)
    with pytest.raises(ValueError):
        elementwise("tanh", Tensor(x))
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_sigmoid_clamps_extremes():
    out = sigmoid(Tensor([-1000.0, 1000.0], dtype=np.float64)).data
    assert 0 < out[0] < 1e-12
    assert out[1] == pytest.approx(1.0)


def test_mse_examples():
    x = rng(9).random((2, 1, 3, 3))
    assert mse_loss(Tensor(x), Tensor(x)).item() == 0.0
    assert mse_loss(Tensor([[1.0, 1.0]]), Tensor([[0.0, 0.0]])).item() == 1.0

    pred, label = rng(10).random((2, 1, 4, 4)), rng(11).random((2, 1, 4, 4))
    tape = Tape()
    grads = backward(mse_loss(tape.watch("pred", pred), Tensor(label)), tape)
    np.testing.assert_allclose(grads["pred"], 2 * (pred - label) / pred.size)


def test_bce_examples():
    assert bce_loss(Tensor(np.full(4, 0.5)), Tensor([0.0, 1.0, 0.0, 1.0])).item() == pytest.approx(np.log(2))
    assert bce_loss(Tensor([0.0, 1.0], dtype=np.float64), Tensor([0.0, 1.0])).item() <= 1e-6
    assert bce_loss(Tensor([0.9], dtype=np.float64), Tensor([1.0])).item() == pytest.approx(0.105361, abs=1e-6)
    with pytest.raises(ValueError):
        bce_loss(Tensor([0.5]), Tensor([0.5]))


def test_backward_square():
    x = rng(12).normal(size=(3, 4))
    tape = Tape()
    t = tape.watch("x", x)
    unused = tape.watch("p", np.ones(2))
    grads = backward(tensor_sum(mul(t, t)), tape)
    np.testing.assert_allclose(grads["x"], 2 * x)
    np.testing.assert_array_equal(grads["p"], np.zeros(2))
    assert unused.shape == (2,)


def test_backward_needs_scalar_on_tape():
    tape = Tape()
    x = tape.watch("x", np.ones(3))
    with pytest.raises(ShapeError):
        backward(x, tape)
    with pytest.raises(ValueError):
        backward(tensor_sum(x), Tape())


def test_backward_replay_is_bit_identical():
    x = rng(13).normal(size=(1, 2, 4, 4))
    w = rng(14).normal(size=(3, 2, 3, 3))

    def run():
        tape = Tape()
        out = relu(conv2d(tape.watch("x", x), tape.watch("w", w), Tensor(np.zeros(3)), padding=1))
        return backward(mse_loss(out, Tensor(np.zeros(out.shape))), tape)

    first, second = run(), run()
    for name in first:
        assert first[name].tobytes() == second[name].tobytes()


def test_mixing_tapes_is_an_error():
    a, b = Tape().watch("a", np.ones(2)), Tape().watch("b", np.ones(2))
    with pytest.raises(ValueError):
        add(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_conv_relu_mse_graph_gradients(seed):
    r = rng(seed)
    label = r.random((2, 3, 5, 5))

    def f(p):
        out = relu(conv2d(p["x"], p["w"], p["b"], padding=1))
        return mse_loss(out, Tensor(label))

    # biases of +-3 against small weights keep every pre-activation clear of the relu kink
    inputs = {"x": r.random((2, 2, 5, 5)), "w": 0.1 * r.normal(size=(3, 2, 3, 3)), "b": np.array([3.0, -3.0, 3.0])}
    errors = gradient_check(f, inputs)
    assert max(errors.values()) <= TOL


OPS = {
    "maxpool2d": (lambda p: tensor_sum(mul(maxpool2d(p["x"]), Tensor(np.arange(8.0).reshape(1, 2, 2, 2)))), (1, 2, 4, 4)),
    "upsample": (lambda p: mse_loss(upsample_nearest(p["x"]), Tensor(np.ones((1, 2, 4, 4)))), (1, 2, 2, 2)),
    "concat": (lambda p: mse_loss(concat_channels(p["x"], p["x"]), Tensor(np.zeros((1, 4, 2, 2)))), (1, 2, 2, 2)),
    "sigmoid": (lambda p: tensor_sum(mul(sigmoid(p["x"]), sigmoid(p["x"]))), (6,)),
    "relu": (lambda p: tensor_sum(mul(relu(p["x"]), p["x"])), (6,)),
    "sub_scale": (lambda p: tensor_sum(mul(sub(p["x"], scale(p["x"], 3.0)), p["x"])), (6,)),
    "reshape_select": (lambda p: tensor_sum(mul(select_column(reshape(p["x"], (3, 2)), 1), Tensor([1.0, 2.0, 3.0]))), (6,)),
    "bce": (lambda p: bce_loss(sigmoid(p["x"]), Tensor([0.0, 1.0, 1.0, 0.0, 1.0, 0.0])), (6,)),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("op", sorted(OPS))
def test_operation_gradients(op, seed):
    f, shape = OPS[op]
    inputs = {"x": rng(100 + seed).normal(size=shape)}
    assert gradient_check(f, inputs)["x"] <= TOL


@pytest.mark.parametrize("seed", range(10))
def test_affine_gradients(seed):
    r = rng(seed)

    def f(p):
        return tensor_sum(mul(affine(p["x"], p["w"], p["b"]), Tensor([[1.0, -2.0]] * 3)))

    errors = gradient_check(f, {"x": r.normal(size=(3, 4)), "w": r.normal(size=(4, 2)), "b": r.normal(size=2)})
    assert max(errors.values()) <= TOL


def test_finite_difference_check_examples():
    assert finite_difference_check(tensor_sum, rng(0).random((3, 3))) < 1e-8
    label = Tensor(rng(1).random((2, 4)))
    assert finite_difference_check(lambda x: mse_loss(x, label), rng(2).random((2, 4))) <= 1e-6


@pytest.mark.parametrize("epsilon", [1e-8, 1e-2])
def test_finite_difference_epsilon_range(epsilon):
    with pytest.raises(ValueError):
        finite_difference_check(tensor_sum, np.ones(2), epsilon)
