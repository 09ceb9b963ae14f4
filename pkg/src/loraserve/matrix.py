"""Dense row-major matrices, the reference GEMM oracle and in-place updates."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from . import _backend

_HEADER = struct.Struct("<IIB")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        super().__init__(f"{message}: " + " vs ".join(f"{r}x{c}" for r, c in shapes))
        self.shapes = shapes


class Matrix:
    """A non-empty 2-D float32 or float64 matrix in one contiguous buffer.

    ``array`` is the 2-D view; ``data`` is the flat row-major view of the
    same storage. Values are only changed through :func:`add_inplace` and
    :func:`sub_inplace`.
    """

    __slots__ = ("array",)

    def __init__(self, values, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported scalar type {dtype}")
        arr = np.array(values, dtype=dtype, order="C", copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"matrix must be 2-D, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError("empty matrix", arr.shape)
        self.array = arr

    @classmethod
    def wrap(cls, arr):
        """Adopt a C-contiguous 2-D float array without copying."""
        if not (isinstance(arr, np.ndarray) and arr.ndim == 2 and arr.flags.c_contiguous):
            raise ShapeError("wrap needs a C-contiguous 2-D array")
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported scalar type {arr.dtype}")
        if arr.size == 0:
            raise ShapeError("empty matrix", arr.shape)
        obj = cls.__new__(cls)
        obj.array = arr
        return obj

    @classmethod
    def zeros(cls, rows, cols, dtype=np.float32):
        return cls.wrap(np.zeros((rows, cols), dtype=dtype))

    @classmethod
    def identity(cls, n, dtype=np.float32):
        return cls.wrap(np.eye(n, dtype=dtype))

    @classmethod
    def random(cls, rows, cols, rng=None, scale=1.0, dtype=np.float32):
        rng = np.random.default_rng(rng)
        return cls.wrap((rng.standard_normal((rows, cols)) * scale).astype(dtype))

    @property
    def rows(self):
        return self.array.shape[0]

    @property
    def cols(self):
        return self.array.shape[1]

    @property
    def shape(self):
        return self.array.shape

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def scalar_width(self):
        return self.array.dtype.itemsize

    @property
    def data(self):
        return self.array.reshape(-1)

    @property
    def nbytes(self):
        return self.array.nbytes

    def copy(self):
        return Matrix.wrap(self.array.copy())

    def astype(self, dtype):
        return Matrix.wrap(np.ascontiguousarray(self.array, dtype=dtype))

    def tolist(self):
        return self.array.tolist()

    def __array__(self, dtype=None, copy=None):
        return self.array if dtype is None else self.array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.array, other.array))

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols}, {self.dtype.name})"


def gemm_reference(a: Matrix, b: Matrix) -> Matrix:
    """Naive triple-loop product with 64-bit accumulation; the result is float64."""
    if a.cols != b.rows:
        raise ShapeError("gemm dimension mismatch", a.shape, b.shape)
    x, y = a.array, b.array
    if x.dtype != y.dtype:
        x, y = x.astype(np.float64), y.astype(np.float64)
    return Matrix.wrap(_backend.kernels.gemm_reference(x, y))


def _check_same(target, delta):
    if target.shape != delta.shape:
        raise ShapeError("shape mismatch", target.shape, delta.shape)


def add_inplace(target: Matrix, delta: Matrix) -> None:
    _check_same(target, delta)
    np.add(target.array, delta.array, out=target.array, casting="same_kind")


def sub_inplace(target: Matrix, delta: Matrix) -> None:
    _check_same(target, delta)
    np.subtract(target.array, delta.array, out=target.array, casting="same_kind")


def max_abs_diff(a: Matrix, b: Matrix) -> float:
    _check_same(a, b)
    return float(np.max(np.abs(a.array.astype(np.float64) - b.array.astype(np.float64))))


def save_binary(m: Matrix, path) -> None:
    """Write the little-endian ``rows:u32 cols:u32 width:u8`` header and payload."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(m.rows, m.cols, m.scalar_width))
        fh.write(np.ascontiguousarray(m.array, dtype=_DTYPES[m.scalar_width]).tobytes())


def load_binary(path) -> Matrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated matrix header")
    rows, cols, width = _HEADER.unpack_from(raw)
    if width not in _DTYPES:
        raise ValueError(f"{path}: unsupported scalar width {width}")
    expected = _HEADER.size + rows * cols * width
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=_DTYPES[width], offset=_HEADER.size).reshape(rows, cols)
    return Matrix(arr, dtype=_DTYPES[width].newbyteorder("="))


def load_csv(path, dtype=np.float32) -> Matrix:
    """Small human-readable fixtures: one matrix row per line, comma separated."""
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ShapeError(f"{path}: ragged rows of widths {sorted(widths)}")
    return Matrix(rows, dtype=dtype)
