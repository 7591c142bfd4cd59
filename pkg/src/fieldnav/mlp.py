"""Small dense-network radiance fields with a binary weight format.

The network splits into two stacks.  The density stack maps the
positional encoding of a point to one scalar; its final activation must
be softplus or relu so density stays non-negative.  The color stack maps
the concatenated position and direction encodings to RGB through a final
sigmoid so channels stay in [0,1].

Weight files are self-describing little-endian binaries (see
docs/formats.md for a worked byte-level example):

    magic "MLPF" | u32 version=1 | u32 L_pos | u32 L_dir
    | 6*f32 bounds (lo,hi) | 3*f32 background | f32 density_scale
    | density stack | color stack

where each stack is ``u32 n_layers`` followed per layer by ``u32 in_dim |
u32 out_dim | u8 activation | f32 weights (out*in, row-major) | f32
biases (out)``.  Activation tags: 0 identity, 1 relu, 2 softplus,
3 sigmoid, 4 tanh.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"MLPF"
VERSION = 1

ACTIVATION_TAGS = {"identity": 0, "relu": 1, "softplus": 2, "sigmoid": 3, "tanh": 4}
TAG_NAMES = {v: k for k, v in ACTIVATION_TAGS.items()}
DENSITY_HEAD_ACTIVATIONS = ("relu", "softplus")


class MalformedWeights(ValueError):
    """Weight file does not parse or its layer shapes do not chain."""


class UnsupportedActivation(ValueError):
    """Unknown activation tag, or a tag not allowed for that head."""


def _activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        # log(1+e^x) without overflow for large x.
        return np.logaddexp(0.0, x)
    if name == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if name == "tanh":
        return np.tanh(x)
    raise UnsupportedActivation(f"unknown activation {name!r}")


def _activation_derivative(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        return (x > 0.0).astype(float)
    if name == "softplus":
        return _activation("sigmoid", x)
    if name == "sigmoid":
        s = _activation("sigmoid", x)
        return s * (1.0 - s)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    raise UnsupportedActivation(f"unknown activation {name!r}")


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATION_TAGS:
            raise UnsupportedActivation(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise MalformedWeights("layer weight/bias shapes inconsistent")


def positional_encoding(x: np.ndarray, order: int) -> np.ndarray:
    """[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]."""
    x = np.asarray(x, dtype=float)
    parts = [x]
    for k in range(order):
        scaled = (2.0**k) * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def encoding_dim(component_dim: int, order: int) -> int:
    return component_dim * (1 + 2 * order)


def _encoding_jacobian(x: np.ndarray, order: int) -> np.ndarray:
    """d(encoding)/dx, shape (..., encoding_dim, 3)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))
    blocks = [eye]
    for k in range(order):
        scale = 2.0**k
        scaled = scale * x
        blocks.append(scale * np.cos(scaled)[..., None] * eye)
        blocks.append(-scale * np.sin(scaled)[..., None] * eye)
    return np.concatenate(blocks, axis=-2)


def _forward(layers: Sequence[DenseLayer], x: np.ndarray) -> np.ndarray:
    h = x
    for layer in layers:
        h = _activation(layer.activation, h @ layer.weight.T + layer.bias)
    return h


def _forward_with_jacobian(
    layers: Sequence[DenseLayer], x: np.ndarray, jac: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Forward pass carrying J = d(output)/d(input of ``jac``)."""
    h = x
    for layer in layers:
        z = h @ layer.weight.T + layer.bias
        deriv = _activation_derivative(layer.activation, z)
        jac = deriv[..., None] * np.einsum("oi,...ij->...oj", layer.weight, jac)
        h = _activation(layer.activation, z)
    return h, jac


def _validate_stack(
    layers: Sequence[DenseLayer], input_dim: int, output_dim: int, label: str
) -> None:
    if not layers:
        raise MalformedWeights(f"{label} stack has no layers")
    if layers[0].weight.shape[1] != input_dim:
        raise MalformedWeights(
            f"{label} stack expects input dim {layers[0].weight.shape[1]}, "
            f"encoding provides {input_dim}"
        )
    for prev, cur in zip(layers, layers[1:]):
        if cur.weight.shape[1] != prev.weight.shape[0]:
            raise MalformedWeights(f"{label} stack layer shapes do not chain")
    if layers[-1].weight.shape[0] != output_dim:
        raise MalformedWeights(f"{label} stack must end with {output_dim} outputs")


class MlpField:
    """Radiance field backed by two dense stacks; immutable after init."""

    def __init__(
        self,
        density_layers: Sequence[DenseLayer],
        color_layers: Sequence[DenseLayer],
        l_pos: int = 6,
        l_dir: int = 4,
        bounds_lo=(-10.0, -10.0, -10.0),
        bounds_hi=(10.0, 10.0, 10.0),
        background=(0.5, 0.5, 0.5),
        density_scale: float = 1.0,
    ):
        self.density_layers = tuple(density_layers)
        self.color_layers = tuple(color_layers)
        self.l_pos = int(l_pos)
        self.l_dir = int(l_dir)
        self.bounds_lo = np.asarray(bounds_lo, dtype=float)
        self.bounds_hi = np.asarray(bounds_hi, dtype=float)
        self.background = np.asarray(background, dtype=float)
        self.density_scale = float(density_scale)

        pos_dim = encoding_dim(3, self.l_pos)
        _validate_stack(self.density_layers, pos_dim, 1, "density")
        _validate_stack(self.color_layers, pos_dim + encoding_dim(3, self.l_dir), 3, "color")
        if self.density_layers[-1].activation not in DENSITY_HEAD_ACTIVATIONS:
            raise UnsupportedActivation(
                f"density head must use one of {DENSITY_HEAD_ACTIVATIONS}, "
                f"got {self.density_layers[-1].activation!r}"
            )
        if self.color_layers[-1].activation != "sigmoid":
            raise UnsupportedActivation("color head must use sigmoid")

    def _inside_bounds(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.bounds_lo) & (points <= self.bounds_hi), axis=-1)

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        raw = _forward(self.density_layers, positional_encoding(points, self.l_pos))
        dens = self.density_scale * raw[..., 0]
        return np.where(self._inside_bounds(points), dens, 0.0)

    def density_gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        enc = positional_encoding(points, self.l_pos)
        enc_jac = _encoding_jacobian(points, self.l_pos)
        _, jac = _forward_with_jacobian(self.density_layers, enc, enc_jac)
        grad = self.density_scale * jac[..., 0, :]
        return np.where(self._inside_bounds(points)[..., None], grad, 0.0)

    def color(self, points: np.ndarray, directions: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        directions = np.broadcast_to(np.asarray(directions, dtype=float), points.shape)
        enc = np.concatenate(
            [
                positional_encoding(points, self.l_pos),
                positional_encoding(directions, self.l_dir),
            ],
            axis=-1,
        )
        return _forward(self.color_layers, enc)

    def color_jacobian(self, points: np.ndarray, directions: np.ndarray):
        """(dc/dposition, dc/ddirection), each shaped (..., 3, 3)."""
        points = np.asarray(points, dtype=float)
        directions = np.broadcast_to(np.asarray(directions, dtype=float), points.shape)
        enc = np.concatenate(
            [
                positional_encoding(points, self.l_pos),
                positional_encoding(directions, self.l_dir),
            ],
            axis=-1,
        )
        jp = _encoding_jacobian(points, self.l_pos)
        jd = _encoding_jacobian(directions, self.l_dir)
        joint = np.zeros(points.shape[:-1] + (jp.shape[-2] + jd.shape[-2], 6))
        joint[..., : jp.shape[-2], :3] = jp
        joint[..., jp.shape[-2] :, 3:] = jd
        _, jac = _forward_with_jacobian(self.color_layers, enc, joint)
        return jac[..., :3], jac[..., 3:]


def eval_mlp(field: MlpField, point: np.ndarray, direction: np.ndarray):
    """(RGB, density) at a single query; the interface used by tooling."""
    return field.color(point, direction), field.density(point)


# -- binary serialization ------------------------------------------------------


def _pack_stack(layers: Sequence[DenseLayer]) -> bytes:
    chunks = [struct.pack("<I", len(layers))]
    for layer in layers:
        out_dim, in_dim = layer.weight.shape
        chunks.append(struct.pack("<IIB", in_dim, out_dim, ACTIVATION_TAGS[layer.activation]))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_mlp(field: MlpField, path) -> None:
    header = MAGIC + struct.pack("<III", VERSION, field.l_pos, field.l_dir)
    header += np.concatenate([field.bounds_lo, field.bounds_hi]).astype("<f4").tobytes()
    header += field.background.astype("<f4").tobytes()
    header += struct.pack("<f", field.density_scale)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_pack_stack(field.density_layers))
        fh.write(_pack_stack(field.color_layers))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise MalformedWeights("weight file truncated")
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(float)


def _read_stack(reader: _Reader) -> List[DenseLayer]:
    n_layers = reader.u32()
    if n_layers > 1024:
        raise MalformedWeights(f"implausible layer count {n_layers}")
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim = reader.u32(), reader.u32()
        tag = reader.u8()
        if tag not in TAG_NAMES:
            raise UnsupportedActivation(f"unknown activation tag {tag}")
        weight = reader.f32(in_dim * out_dim).reshape(out_dim, in_dim)
        bias = reader.f32(out_dim)
        layers.append(DenseLayer(weight, bias, TAG_NAMES[tag]))
    return layers


def load_mlp(path) -> MlpField:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise MalformedWeights("bad magic; not a weight file")
    version = reader.u32()
    if version != VERSION:
        raise MalformedWeights(f"unsupported version {version}")
    l_pos, l_dir = reader.u32(), reader.u32()
    bounds = reader.f32(6)
    background = reader.f32(3)
    density_scale = float(reader.f32(1)[0])
    density_layers = _read_stack(reader)
    color_layers = _read_stack(reader)
    if reader.offset != len(reader.data):
        raise MalformedWeights("trailing bytes after color stack")
    return MlpField(
        density_layers,
        color_layers,
        l_pos=l_pos,
        l_dir=l_dir,
        bounds_lo=bounds[:3],
        bounds_hi=bounds[3:],
        background=background,
        density_scale=density_scale,
    )
