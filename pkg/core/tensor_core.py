"""Dense and coordinate-sparse 4-way tensors and the multilinear kernels.

Linearization is row-major over (i, j, k, s): s varies fastest. The
mode-n unfolding keeps the remaining modes in ascending order with the last
one fastest, which is the row order produced by ``khatri_rao`` (left factor
slowest). Hence ``unfold(reconstruct(theta), 1) == A @ khatri_rao([B, C, D]).T``.

Tensors, masks and factor sets hold read-only arrays and can be shared across
threads. The dense kernels are one matrix product over the tensor plus a
pass of size I*J*K*F, so their cost is linear in every dimension. The sparse
MTTKRP accumulates nonzeros in storage order, so results are deterministic
for a fixed BLAS thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from core.errors import ArgumentError, SnapshotFormatError

Matrix = NDArray[np.float64]
Dims = tuple[int, int, int, int]

_LETTERS = "ijks"
_MAGIC = b"MVTC"
_VERSION = 1
_HEADER = struct.Struct("<4sI4QQ")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _check_mode(mode: int) -> int:
    if isinstance(mode, bool) or not isinstance(mode, (int, np.integer)) or not 1 <= mode <= 4:
        raise ArgumentError(f"mode must be one of 1, 2, 3, 4, got {mode!r}")
    return int(mode)


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Immutable dense 4-way tensor of float64 values with dims (I, J, K, S)."""

    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 4:
            raise ArgumentError(f"expected a 4-way array, got {arr.ndim} dimensions")
        if min(arr.shape) < 1:
            raise ArgumentError(f"all dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ArgumentError("tensor entries must be finite")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.values.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> NDArray[np.float64]:
        """Values in linearization order."""
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, dims: Sequence[int], flat: Sequence[float]) -> Tensor4:
        dims = tuple(int(d) for d in dims)
        data = np.asarray(flat, dtype=np.float64)
        if len(dims) != 4 or data.size != int(np.prod(dims)):
            raise ArgumentError(f"{data.size} values do not fill dims {dims}")
        return cls(data.reshape(dims))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> Tensor4:
        return cls(np.zeros(tuple(dims)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


TensorLike = Union[Tensor4, np.ndarray]


def _as_array(T: TensorLike) -> np.ndarray:
    if isinstance(T, Tensor4):
        return T.values
    arr = np.asarray(T, dtype=np.float64)
    if arr.ndim != 4:
        raise ArgumentError(f"expected a 4-way array, got {arr.ndim} dimensions")
    return arr


@dataclass(frozen=True, eq=False)
class FactorSet:
    """CP factors: A (I x F), B (J x F), C (K x F), D (S x F).

    Nonnegativity is maintained by the solvers rather than checked here, so
    that the literal (unprojected) update variant can still be represented.
    """

    A: Matrix
    B: Matrix
    C: Matrix
    D: Matrix

    def __post_init__(self) -> None:
        ranks = set()
        for name in "ABCD":
            mat = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if mat.ndim != 2:
                raise ArgumentError(f"factor {name} must be a matrix, got {mat.ndim} dimensions")
            if not np.isfinite(mat).all():
                raise ArgumentError(f"factor {name} has non-finite entries")
            ranks.add(mat.shape[1])
            object.__setattr__(self, name, _freeze(mat))
        if len(ranks) != 1:
            raise ArgumentError(f"factor column counts differ: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return int(self.A.shape[1])

    @property
    def dims(self) -> Dims:
        return (self.A.shape[0], self.B.shape[0], self.C.shape[0], self.D.shape[0])

    def as_list(self) -> list[Matrix]:
        return [self.A, self.B, self.C, self.D]

    @classmethod
    def from_list(cls, factors: Sequence[Matrix]) -> FactorSet:
        if len(factors) != 4:
            raise ArgumentError(f"expected 4 factors, got {len(factors)}")
        return cls(*factors)

    def replace(self, **factors: Matrix) -> FactorSet:
        return replace(self, **factors)

    def is_nonnegative(self) -> bool:
        return all(bool((m >= 0).all()) for m in self.as_list())

    def normalized(self) -> FactorSet:
        """Same reconstruction with unit columns in A, B and C (see :func:`normalize_columns`)."""
        return FactorSet(*normalize_columns(self.as_list()))


def normalize_columns(factors: Sequence[Matrix]) -> list[Matrix]:
    """Move every column's scale into D so that A, B and C have unit columns.

    The reconstruction is unchanged. A column whose A, B or C part is zero
    contributes nothing; its A, B and C parts become uniform unit vectors and
    its D column zero.
    """
    if len(factors) != 4:
        raise ArgumentError(f"expected 4 factors, got {len(factors)}")
    A, B, C, D = (np.array(M, dtype=np.float64) for M in factors)
    norms = [np.linalg.norm(M, axis=0) for M in (A, B, C)]
    scale = norms[0] * norms[1] * norms[2]
    dead = scale == 0.0
    out = []
    for M, n in zip((A, B, C), norms):
        M = M / np.where(dead, 1.0, n)
        M[:, dead] = 1.0 / np.sqrt(M.shape[0])
        out.append(M)
    out.append(D * np.where(dead, 0.0, scale))
    return out


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Membership predicate for the observed index set.

    ``bits`` is either a (K, S) bitmap shared by every (i, j), or a full
    (I, J, K, S) boolean array for arbitrary index sets.
    """

    dims: Dims
    bits: NDArray[np.bool_]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ArgumentError(f"invalid mask dims {dims}")
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.shape not in (dims[2:], dims):
            raise ArgumentError(f"mask bits of shape {bits.shape} do not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bits", _freeze(bits))

    @classmethod
    def from_slab_bitmap(cls, n_locations: int, n_features: int, bitmap: np.ndarray) -> ObservationMask:
        bitmap = np.asarray(bitmap, dtype=bool)
        return cls((n_locations, n_features, *bitmap.shape), bitmap)

    @classmethod
    def full(cls, dims: Sequence[int]) -> ObservationMask:
        dims = tuple(dims)
        return cls(dims, np.ones(dims[2:], dtype=bool))  # type: ignore[arg-type]

    @classmethod
    def empty(cls, dims: Sequence[int]) -> ObservationMask:
        dims = tuple(dims)
        return cls(dims, np.zeros(dims[2:], dtype=bool))  # type: ignore[arg-type]

    @property
    def is_uniform(self) -> bool:
        return self.bits.ndim == 2

    def dense(self) -> NDArray[np.bool_]:
        """Full (I, J, K, S) boolean view."""
        if self.is_uniform:
            return np.broadcast_to(self.bits, self.dims)
        return self.bits

    def complement(self) -> ObservationMask:
        return ObservationMask(self.dims, ~self.bits)

    def contains(self, i: int, j: int, k: int, s: int) -> bool:
        if self.is_uniform:
            return bool(self.bits[k, s])
        return bool(self.bits[i, j, k, s])

    def count(self) -> int:
        if self.is_uniform:
            return int(self.bits.sum()) * self.dims[0] * self.dims[1]
        return int(self.bits.sum())

    def slab_fully_observed(self, s: int) -> bool:
        if self.is_uniform:
            return bool(self.bits[:, s].all())
        return bool(self.bits[..., s].all())

    def slab(self, s: int) -> NDArray[np.bool_]:
        """(I, J, K) membership of GD slab ``s``."""
        return self.dense()[..., s]


def unfold(T: TensorLike, mode: int) -> Matrix:
    """Mode-n unfolding: rows index mode n, columns the other modes (last fastest)."""
    mode = _check_mode(mode)
    arr = _as_array(T)
    return np.moveaxis(arr, mode - 1, 0).reshape(arr.shape[mode - 1], -1)


def khatri_rao(Ms: Sequence[Matrix]) -> Matrix:
    """Columnwise Kronecker product, read left to right (left factor varies slowest)."""
    if len(Ms) < 2:
        raise ArgumentError(f"khatri_rao needs at least 2 matrices, got {len(Ms)}")
    mats = [np.asarray(M, dtype=np.float64) for M in Ms]
    if any(M.ndim != 2 for M in mats):
        raise ArgumentError("khatri_rao inputs must be matrices")
    cols = {M.shape[1] for M in mats}
    if len(cols) != 1:
        raise ArgumentError(f"khatri_rao inputs have mismatched column counts {sorted(cols)}")
    rank = cols.pop()
    out = mats[0]
    for M in mats[1:]:
        out = (out[:, None, :] * M[None, :, :]).reshape(-1, rank)
    return out


def _check_factors(dims: Sequence[int], factors: Sequence[Matrix], mode: int) -> list[Matrix]:
    if len(factors) != 3:
        raise ArgumentError(f"mttkrp takes the 3 non-target factors, got {len(factors)}")
    others = [d for n, d in enumerate(dims) if n != mode - 1]
    mats = [np.asarray(M, dtype=np.float64) for M in factors]
    ranks = {M.shape[1] if M.ndim == 2 else -1 for M in mats}
    if len(ranks) != 1 or -1 in ranks:
        raise ArgumentError("mttkrp factors must be matrices with a shared column count")
    for want, M in zip(others, mats):
        if M.shape[0] != want:
            raise ArgumentError(f"factor with {M.shape[0]} rows does not match dimension {want}")
    return mats


def mttkrp(T: Union[TensorLike, SparseTensor4], factors: Sequence[Matrix], mode: int) -> Matrix:
    """``unfold(T, mode) @ khatri_rao(factors)`` without forming the Khatri-Rao matrix.

    ``factors`` are the three non-target factors in ascending mode order.
    Sparse tensors take the coordinate-list path.
    """
    mode = _check_mode(mode)
    if isinstance(T, SparseTensor4):
        return T.mttkrp(factors, mode)
    arr = _as_array(T)
    mats = _check_factors(arr.shape, factors, mode)
    I, J, K, S = arr.shape
    flat = arr.reshape(I * J * K, S)
    if mode == 4:
        return flat.T @ khatri_rao(mats)
    # contract s first; the remaining two modes are summed in one pass
    W = (flat @ mats[2]).reshape(I, J, K, -1)
    others = [c for n, c in enumerate(_LETTERS[:3]) if n != mode - 1]
    subscripts = f"ijkf,{others[0]}f,{others[1]}f->{_LETTERS[mode - 1]}f"
    return np.einsum(subscripts, W, mats[0], mats[1])


def reconstruct_values(A: Matrix, B: Matrix, C: Matrix, D: Matrix) -> np.ndarray:
    """Dense CP reconstruction as a plain array."""
    A, B, C, D = (np.asarray(M, dtype=np.float64) for M in (A, B, C, D))
    dims = (A.shape[0], B.shape[0], C.shape[0], D.shape[0])
    return (khatri_rao([A, B, C]) @ D.T).reshape(dims)


def reconstruct(theta: Union[FactorSet, Sequence[Matrix]]) -> Tensor4:
    """Sum of F rank-1 tensors: entry (i,j,k,s) = sum_f A(i,f)B(j,f)C(k,f)D(s,f)."""
    if not isinstance(theta, FactorSet):
        theta = FactorSet.from_list(theta)
    return Tensor4(reconstruct_values(*theta.as_list()))


def project_mask(
    T: TensorLike,
    mask: ObservationMask,
    keep: Literal["inside", "outside"] = "inside",
) -> TensorLike:
    """Keep the entries inside (or outside) the mask and zero the rest.

    Selection only, no arithmetic: the two projections partition ``T`` exactly.
    """
    arr = _as_array(T)
    if tuple(arr.shape) != mask.dims:
        raise ArgumentError(f"tensor dims {arr.shape} do not match mask dims {mask.dims}")
    if keep not in ("inside", "outside"):
        raise ArgumentError(f"keep must be 'inside' or 'outside', got {keep!r}")
    members = mask.dense() if keep == "inside" else ~mask.dense()
    out = np.where(members, arr, 0.0)
    return Tensor4(out) if isinstance(T, Tensor4) else out


@dataclass(frozen=True, eq=False)
class SparseTensor4:
    """Coordinate-list tensor, entries sorted by s, then k, then j, then i."""

    dims: Dims
    indices: NDArray[np.int64]
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1, 4)
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if len(dims) != 4 or min(dims) < 1:
            raise ArgumentError(f"invalid dims {dims}")
        if idx.shape[0] != vals.shape[0]:
            raise ArgumentError("indices and values differ in length")
        if idx.size and ((idx < 0).any() or (idx >= np.array(dims)).any()):
            raise ArgumentError("sparse index out of range")
        if not np.isfinite(vals).all():
            raise ArgumentError("tensor entries must be finite")
        order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "indices", _freeze(idx[order]))
        object.__setattr__(self, "values", _freeze(vals[order]))

    @classmethod
    def from_dense(cls, T: TensorLike) -> SparseTensor4:
        arr = _as_array(T)
        idx = np.argwhere(arr != 0)
        return cls(arr.shape, idx, arr[tuple(idx.T)])  # type: ignore[arg-type]

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def density(self) -> float:
        return self.nnz / float(np.prod(self.dims))

    def to_dense(self) -> Tensor4:
        out = np.zeros(self.dims)
        np.add.at(out, tuple(self.indices.T), self.values)
        return Tensor4(out)

    def mttkrp(self, factors: Sequence[Matrix], mode: int) -> Matrix:
        mode = _check_mode(mode)
        mats = _check_factors(self.dims, factors, mode)
        others = [n for n in range(4) if n != mode - 1]
        prod = self.values[:, None] * mats[0][self.indices[:, others[0]]]
        prod = prod * mats[1][self.indices[:, others[1]]]
        prod = prod * mats[2][self.indices[:, others[2]]]
        out = np.zeros((self.dims[mode - 1], mats[0].shape[1]))
        np.add.at(out, self.indices[:, mode - 1], prod)
        return out


def save_snapshot(path: str | Path, T: Tensor4, mask: ObservationMask | None = None) -> None:
    """Write ``T`` (and optionally a uniform mask) in the MVTC binary format.

    Layout, all little-endian: the header (magic, version, I, J, K, S, count),
    then the values as float64 in row-major (i, j, k, s) order with s varying
    fastest, i.e. ``T.values.reshape(-1)``. One flag byte follows; when it is
    1 the K x S mask bits come next, k slowest, packed eight to a byte with
    the first bit in the least significant position.
    """
    if mask is not None:
        if mask.dims != T.dims:
            raise ArgumentError(f"mask dims {mask.dims} do not match tensor dims {T.dims}")
        if not mask.is_uniform:
            raise ArgumentError("only per-(k, s) masks can be serialized")
    header = _HEADER.pack(_MAGIC, _VERSION, *T.dims, T.flat.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(T.flat.astype("<f8").tobytes())
        if mask is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(np.packbits(mask.bits.reshape(-1), bitorder="little").tobytes())


def load_snapshot(path: str | Path) -> tuple[Tensor4, ObservationMask | None]:
    """Read a tensor snapshot written by :func:`save_snapshot`."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise SnapshotFormatError("file shorter than the snapshot header")
    magic, version, i, j, k, s, count = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    dims = (i, j, k, s)
    if count != i * j * k * s:
        raise SnapshotFormatError(f"value count {count} does not match dims {dims}")
    start = _HEADER.size
    end = start + 8 * count
    if len(blob) < end + 1:
        raise SnapshotFormatError("truncated value block")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=start).astype(np.float64)
    tensor = Tensor4(values.reshape(dims))
    if blob[end] == 0:
        return tensor, None
    n_bits = k * s
    packed = np.frombuffer(blob, dtype=np.uint8, offset=end + 1)
    if packed.size * 8 < n_bits:
        raise SnapshotFormatError("truncated mask bitmap")
    bits = np.unpackbits(packed, count=n_bits, bitorder="little").astype(bool).reshape(k, s)
    return tensor, ObservationMask(dims, bits)
