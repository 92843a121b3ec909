import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0
BCE_CLAMP = 1e-7

# A vector-jacobian product maps the output gradient to one gradient per input.
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """Immutable dense array, optionally recorded on a `Tape`.

    Data is stored row-major (NCHW for images). float32 is used on training
    paths, float64 on verification paths.
    """

    __slots__ = ("data", "tape", "index")

    def __init__(
        self,
        data,
        dtype=None,
        tape: Optional["Tape"] = None,
        index: Optional[int] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor data contains NaN or Inf.")
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tracked = f", node={self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float32


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[int, ...]
    vjp: Optional[VJP]
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of executed operations.

    Node indices are assigned in execution order, so reverse index order is
    a reverse topological order.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def watch(self, name: str, data) -> Tensor:
        "Register a named leaf whose gradient `backward` reports."
        if name in self.params:
            raise ValueError(f"Parameter {name!r} is already watched on this tape.")
        arr = data.data if isinstance(data, Tensor) else data
        index = len(self.nodes)
        tensor = Tensor(arr, tape=self, index=index)
        self.nodes.append(Node("leaf", (), None, tensor.shape))
        self.params[name] = index
        return tensor

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP) -> Tensor:
        index = len(self.nodes)
        tensor = Tensor(out, dtype=out.dtype, tape=self, index=index)
        self.nodes.append(
            Node(op, tuple(-1 if t.tape is None else t.index for t in inputs), vjp, tensor.shape)
        )
        return tensor


def custom_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP) -> Tensor:
    """Create the output tensor of an operation, recording it on the inputs' tape.

    Inputs without a tape are constants. Mixing two different tapes is an error.
    """
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"{op}: inputs are recorded on different tapes.")
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced a non-finite value.")
    if not tapes:
        return Tensor(out, dtype=out.dtype)
    (tape,) = tapes.values()
    return tape.record(op, inputs, out, vjp)


def backward(loss: Tensor, tape: Tape) -> Dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns d loss / d p for every watched parameter; parameters the loss does
    not depend on get an all-zero gradient. The tape is not modified, so
    replaying it gives bit-identical gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.index is None:
        raise ValueError("The loss was not produced on this tape.")

    grads: Dict[int, np.ndarray] = {loss.index: np.ones(loss.shape, dtype=loss.dtype)}
    for index in range(loss.index, -1, -1):
        grad = grads.get(index)
        node = tape.nodes[index]
        if grad is None or node.vjp is None:
            continue
        for src, contribution in zip(node.inputs, node.vjp(grad)):
            if src < 0 or contribution is None:
                continue
            if src in grads:
                grads[src] = grads[src] + contribution
            else:
                grads[src] = contribution

    result = {}
    for name, index in tape.params.items():
        shape = tape.nodes[index].shape
        grad = grads.get(index)
        result[name] = np.zeros(shape, dtype=loss.dtype) if grad is None else grad
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Convolution and pooling


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 2D convolution (cross-correlation) on NCHW input with OIKhKw weights."""
    if x.data.ndim != 4 or weights.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKhKw weights, got {x.shape}, {weights.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weights.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {in_ch}")
    if bias.shape != (out_ch,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {out_ch} filters")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    # (N, C, Ho, Wo, Kh, Kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    w_data, b_data = weights.data, bias.data
    out = np.tensordot(windows, w_data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b_data[None, :, None, None]

    def vjp(g):
        g_bias = g.sum(axis=(0, 2, 3))
        g_weights = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        g_xp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w_data[:, :, i, j], axes=([1], [0]))
                g_xp[:, :, i : i + ho, j : j + wo] += contrib.transpose(0, 3, 1, 2)
        g_x = g_xp[:, :, padding : padding + h, padding : padding + w]
        return g_x, g_weights, g_bias

    return custom_op("conv2d", (x, weights, bias), out, vjp)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first
    position of the window in row-major order."""
    if window != 2:
        raise ValueError(f"maxpool2d supports window 2 only, got {window}")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: odd spatial extent {h}x{w}")

    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def vjp(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, argmax[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return custom_op("maxpool2d", (x,), out, vjp)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ValueError(f"upsample_nearest supports factor 2 only, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return custom_op("upsample_nearest", (x,), out, vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW tensors, got {a.shape}, {b.shape}")
    if (a.shape[0], a.shape[2:]) != (b.shape[0], b.shape[2:]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return g[:, :split], g[:, split:]

    return custom_op("concat_channels", (a, b), out, vjp)


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"affine expects NxF input and FxG weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"affine: dimension mismatch {x.shape} @ {weights.shape} + {bias.shape}")
    x_data, w_data = x.data, weights.data
    out = x_data @ w_data + bias.data[None, :]

    def vjp(g):
        return g @ w_data.T, x_data.T @ g, g.sum(axis=0)

    return custom_op("affine", (x, weights, bias), out, vjp)


# Shape plumbing


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return custom_op("reshape", (x,), out, vjp)


def select_column(x: Tensor, column: int) -> Tensor:
    "Column `column` of an NxG tensor as a length-N vector."
    if x.data.ndim != 2:
        raise ShapeError(f"select_column expects an NxG tensor, got {x.shape}")
    out = x.data[:, column]

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, column] = g
        return (full,)

    return custom_op("select_column", (x,), out, vjp)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def vjp(g):
        return (np.full(x.shape, g, dtype=g.dtype),)

    return custom_op("sum", (x,), out, vjp)


# Pointwise operations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def vjp(g):
        return (g * mask,)

    return custom_op("relu", (x,), out, vjp)


def sigmoid(x: Tensor) -> Tensor:
    clamped = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = (1.0 / (1.0 + np.exp(-clamped))).astype(x.dtype)
    inside = np.abs(x.data) <= SIGMOID_CLAMP

    def vjp(g):
        return (g * out * (1 - out) * inside,)

    return custom_op("sigmoid", (x,), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return custom_op("mul", (a, b), a_data * b_data, lambda g: (g * b_data, g * a_data))


def scale(x: Tensor, factor: float) -> Tensor:
    out = (x.data * factor).astype(x.dtype)
    return custom_op("scale", (x,), out, lambda g: ((g * factor).astype(g.dtype),))


ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
}


def elementwise(kind: str, *args) -> Tensor:
    if kind not in ELEMENTWISE:
        raise ValueError(f"Unknown elementwise kind {kind!r}, expected one of {sorted(ELEMENTWISE)}")
    return ELEMENTWISE[kind](*args)


# Losses


def mse_loss(pred: Tensor, label: Tensor) -> Tensor:
    "Mean squared error over every element, i.e. normalised by N*C*W*H for images."
    _check_same_shape("mse_loss", pred, label)
    diff = pred.data - label.data
    count = diff.size
    out = np.asarray(np.sum(diff * diff) / count, dtype=pred.dtype)

    def vjp(g):
        grad = (2.0 * g / count) * diff
        return grad, -grad

    return custom_op("mse_loss", (pred, label), out, vjp)


def bce_loss(prob: Tensor, label: Tensor) -> Tensor:
    "Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."
    _check_same_shape("bce_loss", prob, label)
    y = label.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    p = np.clip(prob.data, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (prob.data >= BCE_CLAMP) & (prob.data <= 1 - BCE_CLAMP)
    count = p.size
    out = np.asarray(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)), dtype=prob.dtype)

    def vjp(g):
        return (g / count) * (p - y) / (p * (1 - p)) * inside, None

    return custom_op("bce_loss", (prob, label), out, vjp)


# Verification


def gradient_check(
    f: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Dict[str, np.ndarray],
    epsilon: float = 1e-4,
    coordinates: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Compare `backward` against central finite differences for every named input.

    `f` maps a dict of tensors to a scalar tensor. When `coordinates` is set,
    only that many seeded coordinates per input are perturbed. Returns the max
    relative error per input, using max(1, |analytic|) as the denominator.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    tape = Tape()
    watched = {name: tape.watch(name, np.asarray(value)) for name, value in inputs.items()}
    analytic = backward(f(watched), tape)

    def evaluate(name: str, value: np.ndarray) -> float:
        args = {k: Tensor(value if k == name else v) for k, v in inputs.items()}
        try:
            result = f(args).item()
        except NumericError as e:
            raise NumericError(f"Finite-difference evaluation failed: {e}")
        if not np.isfinite(result):
            raise NumericError("Finite-difference evaluation is not finite.")
        return result

    rng = np.random.default_rng(seed)
    errors = {}
    for name, value in inputs.items():
        value = np.asarray(value)
        flat_count = value.size
        if coordinates is not None and coordinates < flat_count:
            picks = np.sort(rng.choice(flat_count, size=coordinates, replace=False))
        else:
            picks = np.arange(flat_count)

        worst = 0.0
        for i in picks:
            plus, minus = value.copy(), value.copy()
            plus.flat[i] += epsilon
            minus.flat[i] -= epsilon
            numeric = (evaluate(name, plus) - evaluate(name, minus)) / (2 * epsilon)
            exact = float(analytic[name].flat[i])
            worst = max(worst, abs(numeric - exact) / max(1.0, abs(exact)))
        errors[name] = worst

    return errors


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Union[np.ndarray, Tensor], epsilon: float = 1e-4
) -> float:
    "Max relative error between `backward` and central differences of a tensor-to-scalar `f`."
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    errors = gradient_check(lambda args: f(args["x"]), {"x": data}, epsilon)
    return errors["x"]
