"""Sparse third-order tensors and the 2D <-> 3D index mapping.

A toxicogenomics matrix stores one row per (tissue, gene) pair and one
column per treatment.  Rows are laid out in tissue blocks of ``row_stride``
rows each, so the 2D row of the pair ``(r, u)`` is ``r * row_stride + u``.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import (
    ConfigError,
    CoordinateRangeError,
    DuplicateCoordinateError,
    ParseError,
    UnmappedRowError,
)

__all__ = [
    "SparseTensor3",
    "SparseMatrix",
    "TensorIndexMap",
    "TensorStats",
    "map_row",
    "unmap_row",
    "to_tensor",
    "to_matrix",
    "tensor_stats",
    "write_tensor",
    "read_tensor",
    "format_value",
]

WIDE_STRIDE_FACTOR = 8


def format_value(x: float) -> str:
    """Shortest decimal string that parses back to the same double."""
    return repr(float(x))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class SparseTensor3:
    """Coordinate-form tensor of shape ``dims = (R, U, I)``.

    Parameters
    ----------
    dims : tuple of int
        Mode sizes (tissues, genes, treatments).
    coords : array_like of int, shape (N, 3)
    values : array_like of float, shape (N,)

    Raises
    ------
    CoordinateRangeError
        A coordinate lies outside ``dims``.
    DuplicateCoordinateError
        The same coordinate appears twice.
    """

    __slots__ = ("dims", "coords", "values")

    def __init__(self, dims, coords=None, values=None):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ConfigError(f"dims must be three positive integers, got {dims}")
        if coords is None:
            coords = np.empty((0, 3), dtype=np.int64)
        coords = np.array(coords, dtype=np.int64).reshape(-1, 3)
        if values is None:
            values = np.empty(0, dtype=np.float64)
        values = np.array(values, dtype=np.float64).reshape(-1)
        if coords.shape[0] != values.shape[0]:
            raise ValueError(
                f"{coords.shape[0]} coordinates but {values.shape[0]} values"
            )
        if coords.size:
            bad = np.any((coords < 0) | (coords >= np.array(dims)), axis=1)
            if bad.any():
                first = coords[np.argmax(bad)]
                raise CoordinateRangeError(
                    f"coordinate {tuple(first.tolist())} outside dims {dims}"
                )
            lin = np.ravel_multi_index(coords.T, dims)
            uniq, counts = np.unique(lin, return_counts=True)
            if uniq.size != lin.size:
                dup = np.unravel_index(uniq[counts > 1][0], dims)
                raise DuplicateCoordinateError(
                    f"duplicate coordinate {tuple(int(d) for d in dup)}"
                )
        self.dims = dims
        self.coords = _frozen(coords)
        self.values = _frozen(values)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def __len__(self):
        return self.nnz

    def __repr__(self):
        return f"SparseTensor3(dims={self.dims}, nnz={self.nnz})"

    def __eq__(self, other):
        if not isinstance(other, SparseTensor3):
            return NotImplemented
        if self.dims != other.dims or self.nnz != other.nnz:
            return False
        a, b = self.sorted(), other.sorted()
        return np.array_equal(a.coords, b.coords) and np.array_equal(
            a.values, b.values
        )

    __hash__ = None

    def linear_index(self) -> np.ndarray:
        return np.ravel_multi_index(self.coords.T, self.dims)

    def sorted(self) -> "SparseTensor3":
        """Copy with entries in lexicographic (r, u, i) order."""
        order = np.argsort(self.linear_index(), kind="stable")
        return self._take(order)

    def take(self, index) -> "SparseTensor3":
        """Subset of entries selected by an integer or boolean index."""
        return self._take(np.asarray(index))

    def _take(self, index):
        t = object.__new__(SparseTensor3)
        t.dims = self.dims
        t.coords = _frozen(self.coords[index].copy())
        t.values = _frozen(self.values[index].copy())
        return t

    def with_values(self, values) -> "SparseTensor3":
        """Same coordinates, new values (validated for shape only)."""
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != self.nnz:
            raise ValueError("value count does not match entry count")
        t = object.__new__(SparseTensor3)
        t.dims = self.dims
        t.coords = self.coords
        t.values = _frozen(values)
        return t

    @property
    def r(self):
        return self.coords[:, 0]

    @property
    def u(self):
        return self.coords[:, 1]

    @property
    def i(self):
        return self.coords[:, 2]


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Coordinate-form 2D matrix: parallel ``rows``, ``cols``, ``values``."""

    shape: tuple
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        for name, dtype in (("rows", np.int64), ("cols", np.int64), ("values", np.float64)):
            object.__setattr__(
                self, name, _frozen(np.array(getattr(self, name), dtype=dtype).reshape(-1))
            )
        if not (self.rows.size == self.cols.size == self.values.size):
            raise ValueError("rows, cols and values must have equal length")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def sorted(self) -> "SparseMatrix":
        order = np.lexsort((self.cols, self.rows))
        return SparseMatrix(self.shape, self.rows[order], self.cols[order], self.values[order])

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        if self.shape != other.shape or self.nnz != other.nnz:
            return False
        a, b = self.sorted(), other.sorted()
        return (
            np.array_equal(a.rows, b.rows)
            and np.array_equal(a.cols, b.cols)
            and np.array_equal(a.values, b.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class TensorIndexMap:
    """Bijection between 2D rows and (tissue, gene) pairs.

    ``row_stride`` equals ``gene_count`` in block layout and
    ``8 * gene_count`` in paper-exact layout, where rows ``u >= gene_count``
    inside each block are padding.
    """

    gene_count: int
    tissue_count: int
    row_stride: int
    treatment_count: int

    def __post_init__(self):
        for name in ("gene_count", "tissue_count", "row_stride", "treatment_count"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.row_stride < self.gene_count:
            raise ConfigError(
                f"row_stride {self.row_stride} smaller than gene_count {self.gene_count}"
            )

    @classmethod
    def create(cls, tissue_count, gene_count, treatment_count, mode="block"):
        if mode == "block":
            stride = gene_count
        elif mode == "paper-exact":
            stride = WIDE_STRIDE_FACTOR * gene_count
        else:
            raise ConfigError(f"unknown stride mode {mode!r}", flag="--stride-mode")
        return cls(int(gene_count), int(tissue_count), int(stride), int(treatment_count))

    @property
    def mode(self) -> str:
        if self.row_stride == self.gene_count:
            return "block"
        if self.row_stride == WIDE_STRIDE_FACTOR * self.gene_count:
            return "paper-exact"
        return "custom"

    @property
    def dims(self) -> tuple:
        return (self.tissue_count, self.gene_count, self.treatment_count)

    @property
    def n_rows(self) -> int:
        return self.tissue_count * self.row_stride

    def to_dict(self) -> dict:
        return {
            "gene_count": self.gene_count,
            "tissue_count": self.tissue_count,
            "row_stride": self.row_stride,
            "treatment_count": self.treatment_count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["gene_count"]),
            int(d["tissue_count"]),
            int(d["row_stride"]),
            int(d["treatment_count"]),
        )


def map_row(index_map: TensorIndexMap, r, u):
    """2D row index of tissue ``r``, gene ``u``.  Accepts scalars or arrays."""
    r_arr, u_arr = np.asarray(r), np.asarray(u)
    if np.any((r_arr < 0) | (r_arr >= index_map.tissue_count)):
        raise CoordinateRangeError(f"tissue index out of range [0, {index_map.tissue_count})")
    if np.any((u_arr < 0) | (u_arr >= index_map.gene_count)):
        raise CoordinateRangeError(f"gene index out of range [0, {index_map.gene_count})")
    row = r_arr.astype(np.int64) * index_map.row_stride + u_arr
    return int(row) if row.ndim == 0 else row


def unmap_row(index_map: TensorIndexMap, row):
    """Inverse of :func:`map_row`; returns ``(r, u)``.

    Raises
    ------
    UnmappedRowError
        The row falls in a padding region or beyond the last tissue block.
    """
    row_arr = np.asarray(row, dtype=np.int64)
    r, u = np.divmod(row_arr, index_map.row_stride)
    bad = (row_arr < 0) | (r >= index_map.tissue_count) | (u >= index_map.gene_count)
    if np.any(bad):
        offending = np.unique(np.atleast_1d(row_arr)[np.atleast_1d(bad)])
        shown = ", ".join(str(x) for x in offending[:10])
        more = "" if offending.size <= 10 else f" (+{offending.size - 10} more)"
        raise UnmappedRowError(f"unmappable rows: {shown}{more}", rows=offending.tolist())
    if row_arr.ndim == 0:
        return int(r), int(u)
    return r, u


def to_tensor(matrix: SparseMatrix, index_map: TensorIndexMap) -> SparseTensor3:
    """Restructure a sparse 2D matrix into the (tissue, gene, treatment) tensor."""
    cols = matrix.cols
    if cols.size and (cols.min() < 0 or cols.max() >= index_map.treatment_count):
        raise CoordinateRangeError(
            f"column index outside [0, {index_map.treatment_count})"
        )
    r, u = unmap_row(index_map, matrix.rows)
    coords = np.column_stack([np.atleast_1d(r), np.atleast_1d(u), cols]).astype(np.int64)
    return SparseTensor3(index_map.dims, coords, matrix.values)


def to_matrix(tensor: SparseTensor3, index_map: TensorIndexMap) -> SparseMatrix:
    """Inverse of :func:`to_tensor`."""
    if tensor.dims != index_map.dims:
        raise CoordinateRangeError(
            f"tensor dims {tensor.dims} do not match index map dims {index_map.dims}"
        )
    rows = map_row(index_map, tensor.r, tensor.u)
    return SparseMatrix(
        (index_map.n_rows, index_map.treatment_count),
        np.atleast_1d(rows),
        tensor.i,
        tensor.values,
    )


@dataclass(frozen=True)
class TensorStats:
    """Coverage summary.  Extremes are NaN (and ``empty`` set) for no entries."""

    density: float
    per_tissue_counts: tuple
    min_value: float
    max_value: float
    mean_value: float
    nnz: int = 0
    empty: bool = field(default=False)


def tensor_stats(tensor: SparseTensor3) -> TensorStats:
    R, U, I = tensor.dims
    counts = np.bincount(tensor.r, minlength=R)
    if tensor.nnz == 0:
        return TensorStats(0.0, tuple(int(c) for c in counts), math.nan, math.nan, math.nan, 0, True)
    v = tensor.values
    mean = float(math.fsum(v) / v.size)
    lo, hi = float(v.min()), float(v.max())
    # fsum can land a hair outside [min, max] only through rounding of the division
    mean = min(max(mean, lo), hi)
    return TensorStats(
        tensor.nnz / (R * U * I),
        tuple(int(c) for c in counts),
        lo,
        hi,
        mean,
        tensor.nnz,
    )


def write_tensor(tensor: SparseTensor3, dest) -> None:
    """Write ``R U I N`` then ``r u i value`` lines, LF endings.

    ``dest`` is a path or a text stream.
    """
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="\n") as fh:
            _write_tensor(tensor, fh)
    else:
        _write_tensor(tensor, dest)


def _write_tensor(tensor: SparseTensor3, fh: TextIO) -> None:
    R, U, I = tensor.dims
    fh.write(f"{R} {U} {I} {tensor.nnz}\n")
    buf = io.StringIO()
    for n, ((r, u, i), v) in enumerate(zip(tensor.coords.tolist(), tensor.values.tolist())):
        buf.write(f"{r} {u} {i} {v!r}\n")
        if n % 65536 == 65535:
            fh.write(buf.getvalue())
            buf = io.StringIO()
    fh.write(buf.getvalue())


def read_tensor(src) -> SparseTensor3:
    if isinstance(src, (str, os.PathLike)):
        with open(src) as fh:
            return _read_tensor(fh)
    return _read_tensor(src)


def _read_tensor(fh: Iterable[str]) -> SparseTensor3:
    it = iter(fh)
    try:
        header = next(it).split()
    except StopIteration:
        raise ParseError("empty tensor file", line=1) from None
    if len(header) != 4:
        raise ParseError("header must be 'R U I N'", line=1)
    try:
        R, U, I, N = (int(h) for h in header)
    except ValueError:
        raise ParseError("non-integer header field", line=1) from None
    coords = np.empty((N, 3), dtype=np.int64)
    values = np.empty(N, dtype=np.float64)
    n = 0
    for lineno, line in enumerate(it, start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError("expected 'r u i value'", line=lineno)
        if n >= N:
            raise ParseError(f"more than {N} entries", line=lineno)
        try:
            coords[n] = (int(parts[0]), int(parts[1]), int(parts[2]))
            values[n] = float(parts[3])
        except ValueError:
            raise ParseError(f"malformed entry {line.strip()!r}", line=lineno) from None
        n += 1
    if n != N:
        raise ParseError(f"header declares {N} entries, found {n}")
    return SparseTensor3((R, U, I), coords, values)
