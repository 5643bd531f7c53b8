"""Dense n-way tensors and the tensor algebra used by the regression model.

All tensors use a column-major canonical layout: the first mode index varies
fastest in the linear order returned by :func:`vec`.  With that layout the
mode-n matricization index map

    j = sum_{l != n} i_l * J_l,    J_l = prod_{m < l, m != n} d_m

(0-based) is a plain Fortran-order reshape after moving mode ``n`` to the
front, and mode-1 matricization is the identity on the linear order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "DimensionError",
    "FormatError",
    "DenseTensor",
    "as_tensor",
    "outer_product",
    "vec",
    "inner_product",
    "contracted_product",
    "mode_n_product",
    "matricize",
    "dematricize",
    "frobenius_norm",
    "l1_norm",
    "add",
    "subtract",
    "scale",
    "axpy",
    "write_dten",
    "read_dten",
    "dumps_dten",
    "loads_dten",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class FormatError(ValueError):
    """Raised when a DTEN payload is malformed."""


class DenseTensor:
    """Immutable dense real tensor.

    Parameters
    ----------
    values : array_like
        Nested sequence or ndarray.  A 0-d input is promoted to shape ``(1,)``.

    Notes
    -----
    Element access ``t[i1, ..., in]`` takes 0-based indices and raises
    ``IndexError`` for anything out of range (negative indices included).
    """

    __slots__ = ("_array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def from_data(cls, shape: Sequence[int], data: Iterable[float]) -> "DenseTensor":
        """Build a tensor from its canonical (mode-1 fastest) linear data."""
        shape = tuple(int(d) for d in shape)
        if not shape or any(d < 1 for d in shape):
            raise DimensionError(f"invalid shape {shape}")
        flat = np.asarray(list(data) if not isinstance(data, np.ndarray) else data,
                          dtype=np.float64).ravel()
        if flat.size != int(np.prod(shape)):
            raise DimensionError(
                f"data length {flat.size} does not match shape {shape}")
        return cls(flat.reshape(shape, order="F"))

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "DenseTensor":
        return cls(np.zeros(tuple(shape)))

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Values in canonical linear order (read-only copy)."""
        out = self._array.ravel(order="F").copy()
        out.setflags(write=False)
        return out

    def to_numpy(self) -> np.ndarray:
        """Writable copy of the values as an ndarray of ``self.shape``."""
        return np.array(self._array)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __getitem__(self, index) -> float:
        if not isinstance(index, tuple):
            index = (index,)
        if len(index) != self.order:
            raise IndexError(f"expected {self.order} indices, got {len(index)}")
        for i, d in zip(index, self.shape):
            if not isinstance(i, (int, np.integer)) or not 0 <= i < d:
                raise IndexError(f"index {index} out of range for shape {self.shape}")
        return float(self._array[index])

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._array, other._array))

    __hash__ = None

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, alpha):
        if isinstance(alpha, (int, float, np.floating, np.integer)):
            return scale(self, float(alpha))
        return NotImplemented

    __rmul__ = __mul__


TensorLike = Union[DenseTensor, np.ndarray, Sequence]


def as_tensor(t: TensorLike) -> DenseTensor:
    return t if isinstance(t, DenseTensor) else DenseTensor(t)


def _arr(t: TensorLike) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


def _wrap(arr: np.ndarray):
    # A fully contracted result is a plain scalar.
    if arr.ndim == 0:
        return float(arr)
    return DenseTensor(arr)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def outer_product(a: TensorLike, b: TensorLike) -> DenseTensor:
    """C[p..., q...] = A[p...] * B[q...]; shape is the concatenation."""
    a, b = _arr(a), _arr(b)
    return DenseTensor(np.multiply.outer(a, b))


def vec(t: TensorLike) -> np.ndarray:
    """Flatten in canonical order (mode 1 fastest)."""
    return _arr(t).ravel(order="F")


def inner_product(x: TensorLike, y: TensorLike) -> float:
    x, y = _arr(x), _arr(y)
    _check_same_shape(x, y, "inner_product")
    return float(np.dot(x.ravel(order="F"), y.ravel(order="F")))


def contracted_product(a: TensorLike, b: TensorLike, q: int):
    """Contract the last ``q`` modes of ``a`` with the first ``q`` modes of ``b``.

    Returns a tensor of shape ``a.shape[:-q] + b.shape[q:]``, or a float when
    every mode is contracted.
    """
    a, b = _arr(a), _arr(b)
    q = int(q)
    if q < 0 or q > a.ndim or q > b.ndim:
        raise DimensionError(f"cannot contract {q} modes of {a.shape} and {b.shape}")
    if a.shape[a.ndim - q:] != b.shape[:q]:
        raise DimensionError(
            f"contracted modes differ: {a.shape[a.ndim - q:]} vs {b.shape[:q]}")
    return _wrap(np.tensordot(a, b, axes=q))


def mode_n_product(t: TensorLike, v: Sequence[float], n: int):
    """Multiply mode ``n`` (0-based) by vector ``v``; the mode is dropped."""
    t = _arr(t)
    v = np.asarray(v, dtype=np.float64).ravel()
    if not 0 <= n < t.ndim:
        raise DimensionError(f"mode {n} out of range for order {t.ndim}")
    if v.size != t.shape[n]:
        raise DimensionError(f"vector length {v.size} != extent {t.shape[n]} of mode {n}")
    return _wrap(np.tensordot(t, v, axes=([n], [0])))


def matricize(t: TensorLike, n: int) -> np.ndarray:
    """Mode-n unfolding, shape ``(d_n, prod_{l != n} d_l)``.

    Element ``T[i_1, ..., i_N]`` lands at row ``i_n`` and column
    ``sum_{l != n} i_l * J_l`` with ``J_l`` the product of the extents of the
    earlier non-``n`` modes.  This is the usual 1-based formula shifted to
    0-based indices.
    """
    t = _arr(t)
    if not 0 <= n < t.ndim:
        raise DimensionError(f"mode {n} out of range for order {t.ndim}")
    return np.moveaxis(t, n, 0).reshape(t.shape[n], -1, order="F")


def dematricize(m: np.ndarray, n: int, shape: Sequence[int]) -> DenseTensor:
    """Inverse of :func:`matricize`."""
    shape = tuple(shape)
    m = np.asarray(m, dtype=np.float64)
    if not 0 <= n < len(shape):
        raise DimensionError(f"mode {n} out of range for order {len(shape)}")
    rest = shape[:n] + shape[n + 1:]
    if m.shape != (shape[n], int(np.prod(rest, dtype=np.int64))):
        raise DimensionError(f"matrix shape {m.shape} does not fit tensor shape {shape}")
    folded = m.reshape((shape[n],) + rest, order="F")
    return DenseTensor(np.moveaxis(folded, 0, n))


def frobenius_norm(t: TensorLike) -> float:
    return float(np.linalg.norm(_arr(t).ravel()))


def l1_norm(t: TensorLike) -> float:
    return float(np.abs(_arr(t)).sum())


def add(a: TensorLike, b: TensorLike) -> DenseTensor:
    a, b = _arr(a), _arr(b)
    _check_same_shape(a, b, "add")
    return DenseTensor(a + b)


def subtract(a: TensorLike, b: TensorLike) -> DenseTensor:
    a, b = _arr(a), _arr(b)
    _check_same_shape(a, b, "subtract")
    return DenseTensor(a - b)


def scale(t: TensorLike, alpha: float) -> DenseTensor:
    return DenseTensor(float(alpha) * _arr(t))


def axpy(alpha: float, x: TensorLike, y: TensorLike) -> DenseTensor:
    """Return ``alpha * x + y``."""
    x, y = _arr(x), _arr(y)
    _check_same_shape(x, y, "axpy")
    return DenseTensor(float(alpha) * x + y)


# ---------------------------------------------------------------------------
# DTEN binary format
# ---------------------------------------------------------------------------

DTEN_MAGIC = b"DTEN1"


def dumps_dten(t: TensorLike) -> bytes:
    """Serialize: magic, u32 order, u32 extents, f64 data (all little-endian)."""
    arr = _arr(t)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = DTEN_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.ravel(order="F").astype("<f8").tobytes()


def loads_dten(payload: bytes) -> DenseTensor:
    head = len(DTEN_MAGIC)
    if payload[:head] != DTEN_MAGIC:
        raise FormatError("bad magic: not a DTEN payload")
    if len(payload) < head + 4:
        raise FormatError("truncated DTEN header")
    (order,) = struct.unpack_from("<I", payload, head)
    if order < 1:
        raise FormatError("DTEN order must be >= 1")
    dims_end = head + 4 + 4 * order
    if len(payload) < dims_end:
        raise FormatError("truncated DTEN extents")
    shape = struct.unpack_from(f"<{order}I", payload, head + 4)
    if any(d < 1 for d in shape):
        raise FormatError(f"DTEN extents must be >= 1, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = dims_end + 8 * count
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "oversized"
        raise FormatError(f"{kind} DTEN payload: {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f8", count=count, offset=dims_end)
    return DenseTensor.from_data(shape, data.astype(np.float64))


def write_dten(path, t: TensorLike) -> None:
    Path(path).write_bytes(dumps_dten(t))


def read_dten(path) -> DenseTensor:
    return loads_dten(Path(path).read_bytes())
