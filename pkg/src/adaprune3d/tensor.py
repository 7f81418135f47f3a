"""Dense 4D activation tensors, their flattened matrix view and reference operators.

Layout is frame-major ``(t, c, h, w)`` in one contiguous buffer, so pruning a
frame skips one contiguous block.  The flattened view treats frame ``t`` as a
``(H*W) x C`` matrix whose rows are spatial positions and columns channels.
All indices here are zero-based.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernel
from .errors import ConfigurationError, ValidationError

__all__ = [
    "Tensor4D",
    "FlatView",
    "ConvSpec",
    "conv3d_dense",
    "avgpool3d_global",
    "affine",
    "write_array",
    "read_array",
    "save_tensor",
    "load_tensor",
]


class Tensor4D:
    """Immutable T x C x H x W activation tensor."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.ndim != 4:
            raise ValidationError(f"expected a 4D (T, C, H, W) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValidationError(f"all dimensions must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, t, c, h, w, dtype=np.float32):
        return cls(np.zeros((t, c, h, w)), dtype=dtype)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def t_frames(self) -> int:
        return self._data.shape[0]

    @property
    def c_channels(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[2]

    @property
    def width(self) -> int:
        return self._data.shape[3]

    @property
    def dtype(self):
        return self._data.dtype

    def flat(self) -> "FlatView":
        return FlatView(self)

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor4D):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __repr__(self):
        t, c, h, w = self.shape
        return f"Tensor4D(T={t}, C={c}, H={h}, W={w}, dtype={self.dtype})"


class FlatView:
    """Matrix view ``x_t[j, k]`` of a :class:`Tensor4D`.

    Element ``x_t[j, k]`` is tensor element ``(t, k, j // W, j % W)``, i.e.
    buffer offset ``((t * C + k) * H + j // W) * W + j % W``.
    """

    __slots__ = ("source",)

    def __init__(self, source: Tensor4D):
        self.source = source

    @property
    def shape(self):
        t, c, h, w = self.source.shape
        return t, h * w, c

    def offset(self, t: int, j: int, k: int) -> int:
        _, c, h, w = self.source.shape
        return ((t * c + k) * h + j // w) * w + j % w

    def __getitem__(self, idx):
        t, j, k = idx
        return self.source.data.reshape(-1)[self.offset(t, j, k)]

    def frame(self, t: int) -> np.ndarray:
        """The (H*W, C) sub-matrix of frame ``t``."""
        _, c, h, w = self.source.shape
        return self.source.data[t].reshape(c, h * w).T

    def matrix(self) -> np.ndarray:
        """All frames stacked: shape (T, H*W, C)."""
        t, c, h, w = self.source.shape
        return self.source.data.reshape(t, c, h * w).transpose(0, 2, 1)


def _triple(v, name):
    if np.isscalar(v):
        v = (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ConfigurationError(f"{name} must have three entries, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Parameters of one 3D convolution layer."""

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 5:
            raise ConfigurationError(f"weights must be (C_out, C_in, K_t, K_h, K_w), got {w.shape}")
        b = np.zeros(w.shape[0], dtype=w.dtype) if self.bias is None else np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise ConfigurationError(f"bias shape {b.shape} does not match C_out={w.shape[0]}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("convolution weights contain NaN or Inf")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self):
        return tuple(self.weights.shape[2:])

    def output_dims(self, t, h, w):
        dims = _kernel.output_dims((t, h, w), self.kernel, self.stride, self.padding)
        if min(dims) < 1:
            raise ConfigurationError(f"input {(t, h, w)} too small for kernel {self.kernel}")
        return dims

    def taps(self):
        return _kernel.tap_matrix(self.weights)


def check_conv_input(x: Tensor4D, spec: ConvSpec):
    if x.c_channels != spec.c_in:
        raise ConfigurationError(f"input has {x.c_channels} channels, layer expects {spec.c_in}")
    return spec.output_dims(x.t_frames, x.height, x.width)


def conv3d_dense(x: Tensor4D, spec: ConvSpec) -> Tensor4D:
    """Zero-padded 3D cross-correlation plus per-channel bias.

    Accumulation order per output element: start from the bias, then add the
    temporal taps in ascending order; each tap is one BLAS dot product over
    ``(c, k_h, k_w)``.
    """
    check_conv_input(x, spec)
    out = _kernel.conv3d_frames(x.data, spec.weights, spec.bias, spec.stride, spec.padding)
    return Tensor4D(out, dtype=out.dtype)


def relu(x: Tensor4D) -> Tensor4D:
    return Tensor4D(np.maximum(x.data, 0), dtype=x.dtype)


def avgpool3d_global(x: Tensor4D) -> np.ndarray:
    """Per-channel mean over all T*H*W positions."""
    return x.data.mean(axis=(0, 2, 3))


def affine(x, weights, bias) -> np.ndarray:
    x = np.asarray(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape != (weights.shape[1],) or bias.shape != (weights.shape[0],):
        raise ConfigurationError(
            f"affine shape mismatch: W{weights.shape}, x{x.shape}, b{bias.shape}"
        )
    return weights @ x + bias


# --------------------------------------------------------------------------
# serialization: uint32 LE header length | JSON header | little-endian f32 data

def write_array(path, array, layout="row-major") -> None:
    arr = np.asarray(array, dtype="<f4")
    header = json.dumps({"dims": list(arr.shape), "dtype": "f32", "layout": layout}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_array(path):
    """Return ``(array, header)`` from a file written by :func:`write_array`."""
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + n])
    if header.get("dtype") != "f32":
        raise ValidationError(f"unsupported dtype {header.get('dtype')!r} in {path}")
    arr = np.frombuffer(raw[4 + n :], dtype="<f4").astype(np.float32)
    dims = header["dims"]
    if arr.size != int(np.prod(dims, dtype=np.int64)):
        raise ValidationError(f"{path}: payload has {arr.size} values, header says {dims}")
    return arr.reshape(dims), header


def save_tensor(path, x: Tensor4D) -> None:
    write_array(path, x.data, layout="tchw")


def load_tensor(path) -> Tensor4D:
    arr, header = read_array(path)
    if header.get("layout") != "tchw" or arr.ndim != 4:
        raise ValidationError(f"{path} does not hold a tchw tensor")
    return Tensor4D(arr)
