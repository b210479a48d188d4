"""A small MLP encoder with hand-written forward and backward passes.

``input -> affine -> ReLU -> ... -> affine -> output activation -> l2-normalize``

Everything runs in float64 numpy. ``forward`` returns the embeddings plus a
cache that ``backward`` consumes to turn ``dL/d(embedding)`` into parameter
gradients.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from ..io import FormatError, atomic_write


class Activation(str, enum.Enum):
    RELU = "relu"
    STHRESH = "sthresh"
    LINEAR = "linear"  # dense baselines only


def sthresh(x, threshold: float = 0.5):
    """Soft thresholding ``sgn(x) * max(|x| - threshold, 0)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def activation_forward(kind: Activation, x):
    kind = Activation(kind)
    if kind is Activation.RELU:
        return relu(x)
    if kind is Activation.STHRESH:
        return sthresh(x)
    return np.asarray(x, dtype=np.float64)


def activation_backward(kind: Activation, pre, grad):
    """Chain ``grad`` through the activation; the subgradient at kinks is 0."""
    kind = Activation(kind)
    if kind is Activation.RELU:
        return grad * (pre > 0)
    if kind is Activation.STHRESH:
        return grad * (np.abs(pre) > 0.5)
    return grad


def l2_normalize(a):
    """Row-wise unit-norm scaling. All-zero rows stay zero; returns ``(z, norms)``."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    safe = np.where(norms > 0, norms, 1.0)
    return a / safe[:, None], norms


def l2_normalize_backward(z, norms, grad):
    """Gradient through ``z = a / ||a||``: the tangential part of ``grad`` over ``||a||``."""
    radial = np.einsum("ij,ij->i", z, grad)
    g = (grad - z * radial[:, None]) / np.where(norms > 0, norms, 1.0)[:, None]
    g[norms == 0] = 0.0
    return g


@dataclass
class Layer:
    weights: np.ndarray  # fan_in x fan_out
    bias: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    norms: np.ndarray | None = None
    output: np.ndarray | None = None

    @property
    def dead_rows(self) -> np.ndarray:
        """Rows whose embedding is identically zero before normalization."""
        return np.flatnonzero(self.norms == 0) if self.norms is not None else np.zeros(0, dtype=int)


@dataclass
class EncoderModel:
    layers: list[Layer]
    output_activation: Activation = Activation.RELU
    normalize_output: bool = True

    def __post_init__(self):
        self.output_activation = Activation(self.output_activation)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer shapes do not chain: {a.shape} -> {b.shape}")

    @classmethod
    def init(
        cls,
        input_dim: int,
        output_dim: int,
        hidden: tuple[int, ...] = (128,),
        output_activation="relu",
        normalize_output: bool = True,
        rng: np.random.Generator | None = None,
        output_bias: float = 0.0,
    ) -> EncoderModel:
        """He-initialized weights, zero hidden biases."""
        rng = np.random.default_rng() if rng is None else rng
        sizes = (input_dim, *hidden, output_dim)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            layers.append(Layer(w, np.zeros(fan_out)))
        layers[-1].bias[:] = output_bias
        return cls(layers, Activation(output_activation), normalize_output)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def copy(self) -> EncoderModel:
        return EncoderModel(
            [Layer(l.weights.copy(), l.bias.copy()) for l in self.layers],
            self.output_activation,
            self.normalize_output,
        )

    def forward(self, inputs) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of shape (n, {self.input_dim}), got {x.shape}")
        cache = ForwardCache(inputs=x)
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = h @ layer.weights + layer.bias
            h = activation_forward(self.output_activation if i == last else Activation.RELU, pre)
            cache.pre.append(pre)
            cache.post.append(h)
        if self.normalize_output:
            h, cache.norms = l2_normalize(h)
        cache.output = h
        return h, cache

    def embed(self, inputs, chunk: int = 4096) -> np.ndarray:
        """Embeddings only, computed in chunks."""
        x = np.asarray(inputs, dtype=np.float64)
        if x.shape[0] == 0:
            return np.zeros((0, self.output_dim))
        return np.concatenate([self.forward(x[i : i + chunk])[0] for i in range(0, x.shape[0], chunk)])

    def backward(self, cache: ForwardCache, grad_output) -> list[np.ndarray]:
        """Parameter gradients ``[dW0, db0, dW1, db1, ...]`` for ``dL/d(output)``."""
        g = np.asarray(grad_output, dtype=np.float64)
        if self.normalize_output:
            g = l2_normalize_backward(cache.output, cache.norms, g)
        grads: list[np.ndarray] = []
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            kind = self.output_activation if i == last else Activation.RELU
            g = activation_backward(kind, cache.pre[i], g)
            below = cache.post[i - 1] if i > 0 else cache.inputs
            grads += [g.sum(axis=0), below.T @ g]
            if i > 0:
                g = g @ self.layers[i].weights.T
        return grads[::-1]


# Checkpoint layout (little-endian):
#   magic b"SPFM" | version u32 | activation code u32 | normalize u32 | num_layers u32
#   num_layers x (fan_in u64, fan_out u64)
#   per layer: weights f32 [fan_in * fan_out, row-major], bias f32 [fan_out]
CKPT_MAGIC = b"SPFM"
CKPT_VERSION = 1
_ACT_CODES = {Activation.RELU: 0, Activation.STHRESH: 1, Activation.LINEAR: 2}
_CKPT_HEADER = struct.Struct("<4sIIII")
_SHAPE = struct.Struct("<QQ")


def model_to_bytes(model: EncoderModel) -> bytes:
    parts = [
        _CKPT_HEADER.pack(
            CKPT_MAGIC, CKPT_VERSION, _ACT_CODES[model.output_activation], int(model.normalize_output), len(model.layers)
        )
    ]
    parts += [_SHAPE.pack(*layer.shape) for layer in model.layers]
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> EncoderModel:
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, act, norm, num_layers = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    codes = {v: k for k, v in _ACT_CODES.items()}
    if act not in codes or num_layers < 1:
        raise FormatError("corrupt checkpoint header")
    off = _CKPT_HEADER.size
    if len(buf) < off + num_layers * _SHAPE.size:
        raise FormatError("truncated layer table")
    shapes = [_SHAPE.unpack_from(buf, off + i * _SHAPE.size) for i in range(num_layers)]
    off += num_layers * _SHAPE.size
    expected = off + 4 * sum(a * b + b for a, b in shapes)
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(buf)}")
    layers = []
    for fan_in, fan_out in shapes:
        w = np.frombuffer(buf, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out).astype(np.float64)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(buf, "<f4", fan_out, off).astype(np.float64)
        off += 4 * fan_out
        layers.append(Layer(w, b))
    try:
        return EncoderModel(layers, codes[act], bool(norm))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_model(path, model: EncoderModel) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> EncoderModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
