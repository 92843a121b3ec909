"""Miniature U-net reconstructor and the frozen two-headed classifier.

Both networks take 1x16x16 grayscale batches. Parameters live in named
float32 collections that serialise to a small bit-exact checkpoint format.
"""
import hashlib
import io
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Dict, List, Optional, Tuple, Type, TypeVar

import numpy as np

from .tensor import (
    Tape,
    Tensor,
    affine,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    reshape,
    select_column,
    sigmoid,
    upsample_nearest,
)

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (1, 16, 16)
MAGIC = b"DBIAS1"

Shape = Tuple[int, ...]
P = TypeVar("P", bound="ParamSet")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _conv(prefix: str, in_ch: int, out_ch: int, k: int = 3) -> Dict[str, Shape]:
    return {f"{prefix}.weight": (out_ch, in_ch, k, k), f"{prefix}.bias": (out_ch,)}


def _dense(prefix: str, n_in: int, n_out: int) -> Dict[str, Shape]:
    return {f"{prefix}.weight": (n_in, n_out), f"{prefix}.bias": (n_out,)}


UNET_SHAPES: Dict[str, Shape] = {
    **_conv("enc1.conv1", 1, 8),
    **_conv("enc1.conv2", 8, 8),
    **_conv("enc2.conv1", 8, 16),
    **_conv("enc2.conv2", 16, 16),
    **_conv("bottleneck.conv1", 16, 32),
    **_conv("bottleneck.conv2", 32, 32),
    **_conv("dec2.up", 32, 16),
    **_conv("dec2.conv1", 32, 16),
    **_conv("dec2.conv2", 16, 16),
    **_conv("dec1.up", 16, 8),
    **_conv("dec1.conv1", 16, 8),
    **_conv("dec1.conv2", 8, 8),
    **_conv("head", 8, 1, k=1),
}


def classifier_shapes(n_heads: int = 2) -> Dict[str, Shape]:
    return {
        **_conv("conv1", 1, 8),
        **_conv("conv2", 8, 16),
        **_dense("dense1", 16 * 4 * 4, 32),
        **_dense("head", 32, n_heads),
    }


def fan_in(shape: Shape) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


@dataclass
class ParamSet:
    """Named parameter tensors with a fixed architecture."""

    tensors: Dict[str, np.ndarray]
    frozen: bool = False

    def __post_init__(self):
        expected = self.expected_shapes()
        unknown = set(self.tensors) - set(expected)
        if unknown:
            raise CheckpointFormatError(f"Unknown parameter name(s): {sorted(unknown)}")
        for name, shape in expected.items():
            if name not in self.tensors:
                raise CheckpointFormatError(f"Missing parameter {name!r}")
            if self.tensors[name].shape != shape:
                raise CheckpointFormatError(
                    f"Parameter {name!r} has shape {self.tensors[name].shape}, expected {shape}"
                )
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValueError(f"Parameter {name!r} contains non-finite values")

    def expected_shapes(self) -> Dict[str, Shape]:
        raise NotImplementedError

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        "Tensors for a forward pass; watched on `tape` unless frozen or tape is None."
        if tape is None or self.frozen:
            return {name: Tensor(value) for name, value in self.tensors.items()}
        return {name: tape.watch(name, value) for name, value in self.tensors.items()}

    def astype(self: P, dtype) -> P:
        return replace(self, tensors={k: v.astype(dtype) for k, v in self.tensors.items()})

    def with_tensors(self: P, tensors: Dict[str, np.ndarray]) -> P:
        return replace(self, tensors=tensors)

    def to_bytes(self) -> bytes:
        with io.BytesIO() as buffer:
            write_checkpoint(self.tensors, buffer)
            return buffer.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class UNetParams(ParamSet):
    def expected_shapes(self) -> Dict[str, Shape]:
        return UNET_SHAPES


@dataclass
class ClassifierParams(ParamSet):
    frozen: bool = True
    n_heads: int = field(default=2)

    def expected_shapes(self) -> Dict[str, Shape]:
        if self.n_heads not in (1, 2):
            raise CheckpointFormatError(f"Classifier must have 1 or 2 heads, got {self.n_heads}")
        return classifier_shapes(self.n_heads)

    def freeze(self) -> "ClassifierParams":
        return replace(self, frozen=True)


def _init(shapes: Dict[str, Shape], seed: int) -> Dict[str, np.ndarray]:
    # He-normal weights, zero biases, drawn in declaration order
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / fan_in(shape))
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return tensors


def init_unet(seed: int = 0) -> UNetParams:
    return UNetParams(_init(UNET_SHAPES, seed))


def init_classifier(seed: int = 0, n_heads: int = 2) -> ClassifierParams:
    return ClassifierParams(_init(classifier_shapes(n_heads), seed), frozen=False, n_heads=n_heads)


def _check_batch(batch: Tensor):
    if batch.data.ndim != 4 or batch.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"Expected an Nx1x16x16 batch, got {batch.shape}")


def _conv_relu(p: Dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return relu(conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=1))


def unet_graph(p: Dict[str, Tensor], batch: Tensor) -> Tensor:
    """Reconstruct a batch from bound parameter tensors. Contracting path: two
    conv blocks with max pooling; expansive path: nearest upsampling + conv,
    skip concatenation, two convs. A 1x1 conv and a sigmoid produce the (0, 1)
    output image."""
    _check_batch(batch)

    e1 = _conv_relu(p, "enc1.conv2", _conv_relu(p, "enc1.conv1", batch))  # 8x16x16
    e2 = _conv_relu(p, "enc2.conv2", _conv_relu(p, "enc2.conv1", maxpool2d(e1)))  # 16x8x8
    bottom = _conv_relu(p, "bottleneck.conv2", _conv_relu(p, "bottleneck.conv1", maxpool2d(e2)))  # 32x4x4

    d2 = _conv_relu(p, "dec2.up", upsample_nearest(bottom))  # 16x8x8
    d2 = _conv_relu(p, "dec2.conv2", _conv_relu(p, "dec2.conv1", concat_channels(e2, d2)))
    d1 = _conv_relu(p, "dec1.up", upsample_nearest(d2))  # 8x16x16
    d1 = _conv_relu(p, "dec1.conv2", _conv_relu(p, "dec1.conv1", concat_channels(e1, d1)))

    return sigmoid(conv2d(d1, p["head.weight"], p["head.bias"], padding=0))


def unet_forward(params: UNetParams, batch: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return unet_graph(params.bind(tape), batch)


def classifier_graph(p: Dict[str, Tensor], batch: Tensor) -> Tensor:
    "Head logits (N x n_heads) from bound parameter tensors."
    _check_batch(batch)
    x = maxpool2d(_conv_relu(p, "conv1", batch))  # 8x8x8
    x = maxpool2d(_conv_relu(p, "conv2", x))  # 16x4x4
    x = reshape(x, (x.shape[0], 16 * 4 * 4))
    x = relu(affine(x, p["dense1.weight"], p["dense1.bias"]))
    return affine(x, p["head.weight"], p["head.bias"])


def classifier_logits(params: ClassifierParams, batch: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return classifier_graph(params.bind(tape), batch)


def classifier_heads(params: ClassifierParams, batch: Tensor, tape: Optional[Tape] = None) -> List[Tensor]:
    "Per-head sigmoid probabilities, one length-N vector per head."
    logits = classifier_logits(params, batch, tape)
    return [sigmoid(select_column(logits, i)) for i in range(params.n_heads)]


def classifier_forward(
    params: ClassifierParams, batch: Tensor, tape: Optional[Tape] = None
) -> Tuple[Tensor, Tensor]:
    """(h1, h2) = (P(y=1|x), P(s=1|x)).

    Frozen parameters are never watched, but gradients still flow to `batch`.
    """
    if params.n_heads != 2:
        raise ValueError(f"classifier_forward needs a two-headed classifier, got {params.n_heads} head(s)")
    h1, h2 = classifier_heads(params, batch, tape)
    return h1, h2


def write_checkpoint(tensors: Dict[str, np.ndarray], stream: BinaryIO):
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", value.ndim))
        stream.write(struct.pack(f"<{value.ndim}I", *value.shape))
        stream.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointTruncatedError(f"Checkpoint truncated while reading {what}")
    return data


def read_checkpoint(stream: BinaryIO) -> Dict[str, np.ndarray]:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4, "name length"))
        name = _read_exact(stream, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(stream, 4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        raw = _read_exact(stream, 4 * size, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return tensors


def save_checkpoint(params: ParamSet, path: str):
    "Write atomically: a partial file is never left at `path`."
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(params.to_bytes())
    os.replace(tmp_path, path)
    logger.info(f"Saved {type(params).__name__} ({params.num_parameters} values) to {path}")


def load_checkpoint(path: str, kind: Type[P] = UNetParams) -> P:
    """Load a checkpoint and validate it against the architecture of `kind`.

    Classifier head count is read from the stored head bias; loaded
    classifiers are frozen.
    """
    with open(path, "rb") as f:
        tensors = read_checkpoint(f)
        if f.read(1):
            raise CheckpointFormatError(f"Trailing bytes after checkpoint data in {path}")

    if issubclass(kind, ClassifierParams):
        head = tensors.get("head.bias")
        n_heads = head.shape[0] if head is not None and head.ndim == 1 else 2
        return kind(tensors, frozen=True, n_heads=n_heads)
    return kind(tensors)
