"""Coordinate MLP mapping a normalised 3D point to colour and density.

Layout: Gaussian Fourier embedding -> 4 ReLU layers with the embedding
re-concatenated before the third -> 4 outputs (sigmoid rgb, ReLU density).
Forward and reverse passes are written out by hand so that gradients reach
both the weights and the input coordinates (and, from there, the camera pose).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

EMBED_SIZE = 93
EMBED_SIGMA = 5.0
HIDDEN = 256
N_HIDDEN = 4
SKIP_LAYER = 2  # zero-based index of the layer that receives the re-concatenated embedding

MAGIC = b"NFLD"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, n_layers, embed size
_TAIL = struct.Struct("<Qd")  # basis seed, basis sigma


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingBasis:
    B: np.ndarray
    seed: int
    sigma: float

    @classmethod
    def create(cls, seed: int, sigma: float = EMBED_SIGMA, size: int = EMBED_SIZE) -> "EmbeddingBasis":
        rng = np.random.default_rng(seed)
        B = rng.normal(0.0, sigma, size=(size, 3))
        B.setflags(write=False)
        return cls(B, int(seed), float(sigma))

    @property
    def size(self) -> int:
        return self.B.shape[0]


def layer_dims(embed_size: int = EMBED_SIZE, hidden: int = HIDDEN,
               n_hidden: int = N_HIDDEN, skip: int = SKIP_LAYER) -> List[Tuple[int, int]]:
    e2 = 2 * embed_size
    dims = []
    fan_in = e2
    for i in range(n_hidden):
        if i == skip:
            fan_in += e2
        dims.append((fan_in, hidden))
        fan_in = hidden
    dims.append((hidden, 4))
    return dims


@dataclass
class FieldParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    skip: int = SKIP_LAYER
    version: int = field(default=0, compare=False)

    @property
    def dims(self) -> List[Tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> List[np.ndarray]:
        """Parameters in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def count(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "FieldParams":
        return FieldParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.skip)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams([w.astype(dtype) for w in self.weights],
                           [b.astype(dtype) for b in self.biases], self.skip)

    def zeros_like(self) -> "FieldParams":
        return FieldParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases], self.skip)

    def bump(self):
        self.version += 1

    def check_finite(self):
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("field parameters contain non-finite values")


def init_params(rng: np.random.Generator, embed_size: int = EMBED_SIZE, hidden: int = HIDDEN,
                n_hidden: int = N_HIDDEN, skip: int = SKIP_LAYER, dtype=np.float32) -> FieldParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in layer_dims(embed_size, hidden, n_hidden, skip):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
    return FieldParams(weights, biases, skip)


def zero_params(embed_size: int = EMBED_SIZE, dtype=np.float32) -> FieldParams:
    dims = layer_dims(embed_size)
    return FieldParams([np.zeros(d, dtype) for d in dims], [np.zeros(d[1], dtype) for d in dims])


def embed(points, basis: EmbeddingBasis, dtype=None) -> np.ndarray:
    """[sin(2 pi B p), cos(2 pi B p)] for points of shape (..., 3)."""
    p = np.asarray(points)
    dtype = dtype or (p.dtype if p.dtype in (np.float32, np.float64) else np.float64)
    a = (2.0 * np.pi) * (p.astype(dtype, copy=False) @ basis.B.T.astype(dtype))
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldCache:
    params: FieldParams
    version: int
    points: np.ndarray
    angles: np.ndarray
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    rgb: np.ndarray


def field_forward(params: FieldParams, basis: EmbeddingBasis, points, keep_cache: bool = False):
    """Evaluate the field at (N, 3) points.

    Returns ``(rgb, sigma)`` or ``(rgb, sigma, cache)`` when ``keep_cache``.
    """
    dtype = params.dtype
    p = np.asarray(points, dtype=dtype).reshape(-1, 3)
    a = (2.0 * np.pi) * (p @ basis.B.T.astype(dtype))
    emb = np.concatenate([np.sin(a), np.cos(a)], axis=-1)
    n_layers = len(params.weights)
    h = emb
    inputs, pre = [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == params.skip:
            h = np.concatenate([h, emb], axis=-1)
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0)
    rgb = _sigmoid(z[:, :3])
    sigma = np.maximum(z[:, 3], 0)
    if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(sigma))):
        params.check_finite()
        raise FloatingPointError("field produced non-finite output")
    if keep_cache:
        cache = FieldCache(params, params.version, p, a, inputs, pre, rgb)
        return rgb, sigma, cache
    return rgb, sigma


def field_backward(cache: FieldCache, basis: EmbeddingBasis, d_rgb, d_sigma,
                   need_params: bool = True, need_points: bool = True):
    """Reverse pass. Returns ``(param grads | None, point grads | None)``."""
    if cache is None:
        raise RuntimeError("field_backward needs the cache from a forward pass")
    params = cache.params
    if cache.version != params.version:
        raise RuntimeError("stale forward cache: parameters changed since the forward pass")
    dtype = params.dtype
    n_layers = len(params.weights)
    e2 = cache.angles.shape[1] * 2
    z_out = cache.pre[-1]
    dz = np.empty_like(z_out)
    rgb = cache.rgb
    dz[:, :3] = np.asarray(d_rgb, dtype=dtype) * rgb * (1 - rgb)
    dz[:, 3] = np.asarray(d_sigma, dtype=dtype) * (z_out[:, 3] > 0)
    grads = params.zeros_like() if need_params else None
    d_emb = np.zeros((len(dz), e2), dtype=dtype) if need_points else None
    for i in range(n_layers - 1, -1, -1):
        if need_params:
            grads.weights[i] = cache.inputs[i].T @ dz
            grads.biases[i] = dz.sum(axis=0)
        if i == 0 and not need_points:
            break
        dh = dz @ params.weights[i].T
        if i == params.skip:
            if need_points:
                d_emb += dh[:, -e2:]
            dh = dh[:, :-e2]
        if i == 0:
            d_emb += dh
            break
        dz = dh * (cache.pre[i - 1] > 0)
    d_points = None
    if need_points:
        e = e2 // 2
        s, c = np.sin(cache.angles), np.cos(cache.angles)
        d_a = d_emb[:, :e] * c - d_emb[:, e:] * s
        d_points = (2.0 * np.pi) * (d_a @ basis.B.astype(dtype))
    return grads, d_points


def serialize(params: FieldParams, basis: EmbeddingBasis) -> bytes:
    dims = params.dims
    parts = [_HEADER.pack(MAGIC, VERSION, 0, len(dims), basis.size)]
    parts.append(struct.pack("<I", params.skip))
    for fan_in, fan_out in dims:
        parts.append(struct.pack("<II", fan_in, fan_out))
    parts.append(_TAIL.pack(basis.seed, basis.sigma))
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def blob_size(dims: Sequence[Tuple[int, int]]) -> int:
    count = sum(i * o + o for i, o in dims)
    return _HEADER.size + 4 + 8 * len(dims) + _TAIL.size + 4 * count


def deserialize(data: bytes, offset: int = 0):
    """Parse one blob. Returns ``(params, basis, bytes consumed)``."""
    try:
        magic, version, _, n_layers, e = _HEADER.unpack_from(data, offset)
    except struct.error as exc:
        raise FieldFormatError("truncated field header") from exc
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"unsupported field version {version}")
    if not 1 <= n_layers <= 64 or e == 0:
        raise FieldFormatError("implausible layer count or embedding size")
    pos = offset + _HEADER.size
    try:
        (skip,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = [struct.unpack_from("<II", data, pos + 8 * i) for i in range(n_layers)]
        pos += 8 * n_layers
        seed, sigma = _TAIL.unpack_from(data, pos)
    except struct.error as exc:
        raise FieldFormatError("truncated field header") from exc
    pos += _TAIL.size
    if dims[0][0] != 2 * e or dims[-1][1] != 4 or skip >= n_layers:
        raise FieldFormatError(f"dims {dims} inconsistent with embedding size {e}")
    for (_, prev_out), (fan_in, _), i in zip(dims, dims[1:], range(1, n_layers)):
        if fan_in != prev_out + (2 * e if i == skip else 0):
            raise FieldFormatError(f"dims {dims} are not a valid layer chain")
    weights, biases = [], []
    for fan_in, fan_out in dims:
        for shape in ((fan_in, fan_out), (fan_out,)):
            n = int(np.prod(shape))
            if pos + 4 * n > len(data):
                raise FieldFormatError("truncated field parameters")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            (weights if len(shape) == 2 else biases).append(arr.astype(np.float32))
    params = FieldParams(weights, biases, skip)
    return params, EmbeddingBasis.create(seed, sigma, e), pos - offset
