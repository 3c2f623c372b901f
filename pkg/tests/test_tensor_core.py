"""Kernels against brute-force loops, masks, sparse tensors and snapshots."""

import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import ArgumentError, SnapshotFormatError
from core.tensor_core import (
    FactorSet,
    ObservationMask,
    SparseTensor4,
    Tensor4,
    khatri_rao,
    load_snapshot,
    mttkrp,
    project_mask,
    reconstruct,
    save_snapshot,
    unfold,
)

dims_st = st.tuples(*[st.integers(min_value=1, max_value=4)] * 4)
rank_st = st.integers(min_value=1, max_value=3)
seed_st = st.integers(min_value=0, max_value=2**32 - 1)
mode_st = st.integers(min_value=1, max_value=4)

ORACLE = settings(max_examples=100, deadline=None)


def _loop_unfold(T, mode):
    dims = T.shape
    rest = [d for n, d in enumerate(dims) if n != mode - 1]
    out = np.zeros((dims[mode - 1], int(np.prod(rest))))
    for idx in itertools.product(*[range(d) for d in dims]):
        others = [x for n, x in enumerate(idx) if n != mode - 1]
        col = int(np.ravel_multi_index(others, rest))
        out[idx[mode - 1], col] = T[idx]
    return out


def _loop_khatri_rao(Ms):
    rows = [M.shape[0] for M in Ms]
    rank = Ms[0].shape[1]
    out = np.zeros((int(np.prod(rows)), rank))
    for idx in itertools.product(*[range(r) for r in rows]):
        row = int(np.ravel_multi_index(idx, rows))
        for f in range(rank):
            out[row, f] = np.prod([M[i, f] for M, i in zip(Ms, idx)])
    return out


def _loop_mttkrp(T, factors, mode):
    rank = factors[0].shape[1]
    out = np.zeros((T.shape[mode - 1], rank))
    for idx in itertools.product(*[range(d) for d in T.shape]):
        others = [x for n, x in enumerate(idx) if n != mode - 1]
        for f in range(rank):
            out[idx[mode - 1], f] += T[idx] * np.prod([M[x, f] for M, x in zip(factors, others)])
    return out


def _loop_reconstruct(A, B, C, D):
    out = np.zeros((A.shape[0], B.shape[0], C.shape[0], D.shape[0]))
    for i, j, k, s in itertools.product(*[range(n) for n in out.shape]):
        out[i, j, k, s] = sum(A[i, f] * B[j, f] * C[k, f] * D[s, f] for f in range(A.shape[1]))
    return out


def _close(got, want, tol=1e-12):
    scale = max(1.0, float(np.abs(want).max(initial=0.0)))
    return float(np.abs(got - want).max(initial=0.0)) <= tol * scale


@ORACLE
@given(dims=dims_st, mode=mode_st, seed=seed_st)
def test_unfold_matches_loops(dims, mode, seed):
    T = np.random.default_rng(seed).standard_normal(dims)
    assert _close(unfold(T, mode), _loop_unfold(T, mode))


@ORACLE
@given(
    rows=st.lists(st.integers(min_value=1, max_value=4), min_size=2, max_size=4),
    rank=rank_st,
    seed=seed_st,
)
def test_khatri_rao_matches_loops(rows, rank, seed):
    rng = np.random.default_rng(seed)
    Ms = [rng.standard_normal((r, rank)) for r in rows]
    assert _close(khatri_rao(Ms), _loop_khatri_rao(Ms))


@ORACLE
@given(dims=dims_st, rank=rank_st, mode=mode_st, seed=seed_st)
def test_mttkrp_matches_loops_dense_and_sparse(dims, rank, mode, seed):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal(dims) * (rng.uniform(size=dims) < 0.6)
    factors = [rng.standard_normal((d, rank)) for n, d in enumerate(dims) if n != mode - 1]
    want = _loop_mttkrp(T, factors, mode)
    assert _close(mttkrp(T, factors, mode), want)
    assert _close(mttkrp(SparseTensor4.from_dense(T), factors, mode), want)


@ORACLE
@given(dims=dims_st, rank=rank_st, seed=seed_st)
def test_reconstruct_matches_loops(dims, rank, seed):
    rng = np.random.default_rng(seed)
    factors = [rng.uniform(size=(d, rank)) for d in dims]
    assert _close(reconstruct(factors).values, _loop_reconstruct(*factors))


@ORACLE
@given(dims=dims_st, seed=seed_st)
def test_project_mask_partitions_tensor(dims, seed):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal(dims)
    mask = ObservationMask(dims, rng.uniform(size=dims) < 0.5)
    inside = project_mask(T, mask, "inside")
    outside = project_mask(T, mask, "outside")
    for idx in itertools.product(*[range(d) for d in dims]):
        assert inside[idx] == (T[idx] if mask.contains(*idx) else 0.0)
    np.testing.assert_array_equal(inside + outside, T)
    assert mask.count() + mask.complement().count() == T.size


def test_unfolding_of_reconstruction_is_factor_times_khatri_rao(rng):
    A, B, C, D = (rng.uniform(size=(d, 3)) for d in (2, 3, 4, 5))
    X = reconstruct([A, B, C, D])
    np.testing.assert_allclose(unfold(X, 1), A @ khatri_rao([B, C, D]).T, rtol=1e-12)
    np.testing.assert_allclose(unfold(X, 4), D @ khatri_rao([A, B, C]).T, rtol=1e-12)


def test_khatri_rao_worked_example():
    left = np.array([[1.0], [2.0]])
    right = np.array([[3.0], [4.0]])
    np.testing.assert_array_equal(khatri_rao([left, right]), [[3.0], [4.0], [6.0], [8.0]])


def test_mttkrp_of_zero_tensor_is_zero(rng):
    factors = [rng.uniform(size=(d, 2)) for d in (3, 2, 4)]
    assert not mttkrp(np.zeros((2, 3, 2, 4)), factors, 1).any()


def test_rank_one_reconstruction_of_ones_is_all_ones():
    ones = [np.ones((d, 1)) for d in (2, 2, 2, 2)]
    np.testing.assert_array_equal(reconstruct(ones).values, np.ones((2, 2, 2, 2)))


def test_tensor_linearization_is_row_major():
    T = Tensor4.from_flat((1, 1, 2, 3), range(6))
    assert T.values[0, 0, 1, 0] == 3.0
    assert T.values[0, 0, 0, 2] == 2.0
    np.testing.assert_array_equal(T.flat, np.arange(6.0))


@pytest.mark.parametrize("mode", [0, 5, True, 1.0])
def test_bad_mode_is_rejected(mode):
    with pytest.raises(ArgumentError):
        unfold(np.zeros((1, 1, 1, 1)), mode)


def test_khatri_rao_rejects_mismatched_columns():
    with pytest.raises(ArgumentError):
        khatri_rao([np.ones((2, 2)), np.ones((2, 3))])


def test_mttkrp_rejects_wrong_factor_rows():
    with pytest.raises(ArgumentError):
        mttkrp(np.zeros((2, 2, 2, 2)), [np.ones((3, 1)), np.ones((2, 1)), np.ones((2, 1))], 1)


def test_tensor_rejects_non_finite_entries():
    with pytest.raises(ArgumentError):
        Tensor4(np.full((1, 1, 1, 1), np.nan))


def test_tensor_values_are_read_only():
    T = Tensor4.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError):
        T.values[0, 0, 0, 0] = 1.0


def test_factor_set_rejects_mismatched_ranks(rng):
    with pytest.raises(ArgumentError):
        FactorSet(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2)))


def test_uniform_mask_membership():
    bitmap = np.array([[True, True, False], [True, False, False]])
    mask = ObservationMask.from_slab_bitmap(2, 3, bitmap)
    assert mask.dims == (2, 3, 2, 3)
    assert mask.contains(1, 2, 1, 0)
    assert not mask.contains(0, 0, 1, 1)
    assert mask.count() == 3 * 2 * 3
    assert mask.slab_fully_observed(0)
    assert not mask.slab_fully_observed(1)
    assert mask.dense().shape == (2, 3, 2, 3)


def test_sparse_tensor_is_sorted_and_round_trips(rng):
    T = rng.standard_normal((3, 2, 2, 4)) * (rng.uniform(size=(3, 2, 2, 4)) < 0.3)
    sp = SparseTensor4.from_dense(T)
    keys = sp.indices[:, 3] * 1000 + sp.indices[:, 2] * 100 + sp.indices[:, 1] * 10 + sp.indices[:, 0]
    assert (np.diff(keys) > 0).all()
    np.testing.assert_array_equal(sp.to_dense().values, T)
    assert sp.nnz == int((T != 0).sum())


def test_sparse_tensor_rejects_out_of_range_index():
    with pytest.raises(ArgumentError):
        SparseTensor4((2, 2, 2, 2), [[0, 0, 0, 2]], [1.0])


def test_snapshot_round_trip_with_mask(tmp_path, rng):
    T = Tensor4(rng.standard_normal((2, 3, 2, 5)))
    bitmap = np.array([[True] * 5, [True] * 4 + [False]])
    mask = ObservationMask.from_slab_bitmap(2, 3, bitmap)
    path = tmp_path / "x.mvtc"
    save_snapshot(path, T, mask)
    loaded, loaded_mask = load_snapshot(path)
    np.testing.assert_array_equal(loaded.values, T.values)
    np.testing.assert_array_equal(loaded_mask.bits, bitmap)
    blob = path.read_bytes()
    assert blob[:4] == b"MVTC"


def test_snapshot_without_mask(tmp_path):
    path = tmp_path / "x.mvtc"
    save_snapshot(path, Tensor4.zeros((1, 1, 1, 2)))
    _, mask = load_snapshot(path)
    assert mask is None


def test_snapshot_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "x.mvtc"
    save_snapshot(path, Tensor4.zeros((1, 1, 1, 1)))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_truncated_snapshot_is_rejected(tmp_path):
    path = tmp_path / "x.mvtc"
    save_snapshot(path, Tensor4.zeros((2, 2, 2, 2)))
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_snapshot_values_are_stored_with_s_fastest(tmp_path):
    values = np.arange(2 * 3 * 2 * 4, dtype=float).reshape(2, 3, 2, 4)
    path = tmp_path / "x.mvtc"
    save_snapshot(path, Tensor4(values))
    blob = path.read_bytes()
    header = struct.Struct("<4sI4QQ")
    _, _, *dims, count = header.unpack_from(blob)
    assert dims == [2, 3, 2, 4] and count == values.size
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=header.size)
    np.testing.assert_array_equal(payload, values.reshape(-1))
    for i, j, k, s in [(0, 0, 0, 1), (0, 0, 1, 0), (1, 2, 0, 3)]:
        assert payload[((i * 3 + j) * 2 + k) * 4 + s] == values[i, j, k, s]
    assert blob[header.size + 8 * count] == 0


def test_normalized_factors_keep_the_reconstruction(rng):
    theta = FactorSet(*(rng.uniform(size=(d, 3)) for d in (4, 3, 2, 5)))
    unit = theta.normalized()
    for M in unit.as_list()[:3]:
        np.testing.assert_allclose(np.linalg.norm(M, axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(reconstruct(unit).values, reconstruct(theta).values, rtol=1e-12)


def test_dead_column_normalizes_to_zero_weight():
    A = np.array([[1.0, 0.0], [1.0, 0.0]])
    unit = FactorSet(A, np.ones((3, 2)), np.ones((2, 2)), np.ones((4, 2))).normalized()
    np.testing.assert_allclose(unit.A[:, 1], 1 / np.sqrt(2))
    np.testing.assert_array_equal(unit.D[:, 1], 0.0)
    np.testing.assert_allclose(unit.D[:, 0], np.sqrt(12.0), rtol=1e-12)
