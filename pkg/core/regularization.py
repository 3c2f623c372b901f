"""Graph-Laplacian and second-difference regularizers, and spectral step-size bounds."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Literal, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg
from scipy.sparse import csgraph, issparse

from config import get_logger, settings
from core.errors import ArgumentError
from core.tensor_core import Matrix

logger = get_logger(__name__)


def _square(M: object, name: str) -> Matrix:
    arr = M.toarray() if issparse(M) else M  # type: ignore[attr-defined]
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ArgumentError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ArgumentError(f"{name} has non-finite entries")
    return arr


def laplacian(adjacency: object) -> Matrix:
    """Combinatorial Laplacian L = Deg - W of a symmetric nonnegative adjacency."""
    W = _square(adjacency, "adjacency")
    if (W < 0).any():
        raise ArgumentError("adjacency weights must be nonnegative")
    if not np.array_equal(W, W.T):
        raise ArgumentError("adjacency must be symmetric")
    if np.diag(W).any():
        raise ArgumentError("adjacency must have a zero diagonal")
    return np.asarray(csgraph.laplacian(W), dtype=np.float64)


def largest_eig(
    M: object,
    tol: float | None = None,
    *,
    method: Literal["auto", "power", "dense"] = "auto",
    max_iter: int | None = None,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite matrix.

    ``auto`` solves small matrices (the F x F Gram matrices) densely and runs
    power iteration above ``settings.dense_eig_cutoff``. Power iteration starts
    from the all-ones vector and restarts from a seeded random vector when the
    iterate is annihilated.
    """
    A = _square(M, "matrix")
    tol = settings.eig_tol if tol is None else tol
    max_iter = settings.eig_max_iter if max_iter is None else max_iter
    n = A.shape[0]
    if n == 0:
        raise ArgumentError("matrix is empty")
    if method not in ("auto", "power", "dense"):
        raise ArgumentError(f"unknown eigenvalue method {method!r}")

    if method == "dense" or (method == "auto" and n <= settings.dense_eig_cutoff):
        top = linalg.eigvalsh(A, subset_by_index=[n - 1, n - 1])[0]
        return max(float(top), 0.0)

    if not A.any():
        return 0.0
    rng = np.random.default_rng(seed)
    x = np.ones(n) / np.sqrt(n)
    lam = 0.0
    restarts = 0
    for iteration in range(max_iter):
        y = A @ x
        norm_y = float(np.linalg.norm(y))
        if norm_y <= np.finfo(float).tiny:
            restarts += 1
            if restarts > 3:
                return 0.0
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            continue
        lam_new = float(x @ y)
        x = y / norm_y
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return max(lam_new, 0.0)
        lam = lam_new
    logger.warning("power_iteration_not_converged", n=n, iterations=max_iter, estimate=lam)
    return max(lam, 0.0)


@dataclass(frozen=True, eq=False)
class LocationGraph:
    """Weighted undirected graph over the I locations."""

    adjacency: Matrix

    def __post_init__(self) -> None:
        W = _square(self.adjacency, "adjacency").copy()
        laplacian(W)
        W.flags.writeable = False
        object.__setattr__(self, "adjacency", W)

    @classmethod
    def empty(cls, n: int) -> LocationGraph:
        """Edgeless graph: its Laplacian is zero, which switches the graph term off."""
        return cls(np.zeros((n, n)))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> LocationGraph:
        """Build from (u, v, weight) triples; each edge is mirrored."""
        W = np.zeros((n, n))
        for line, (u, v, w) in enumerate(edges):
            u, v, w = int(u), int(v), float(w)
            if not (0 <= u < n and 0 <= v < n):
                raise ArgumentError(f"edge {line}: node outside [0, {n})")
            if u == v:
                raise ArgumentError(f"edge {line}: self loop on node {u}")
            if not np.isfinite(w) or w < 0:
                raise ArgumentError(f"edge {line}: weight must be finite and nonnegative")
            W[u, v] = W[v, u] = max(W[u, v], w)
        return cls(W)

    @property
    def n(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency)))

    @cached_property
    def laplacian(self) -> Matrix:
        L = laplacian(self.adjacency)
        L.flags.writeable = False
        return L

    @cached_property
    def spectral_bound(self) -> float:
        """Upper bound on lambda_max(L), inflated by (1 + eig_tol)."""
        if not self.n_edges:
            return 0.0
        return largest_eig(self.laplacian) * (1.0 + settings.eig_tol)

    def edges(self) -> list[tuple[int, int, float]]:
        u, v = np.nonzero(np.triu(self.adjacency))
        return [(int(a), int(b), float(self.adjacency[a, b])) for a, b in zip(u, v)]


@dataclass(frozen=True, eq=False)
class SmoothnessOperator:
    """Second-difference operator over a mode of length n.

    ``fixed`` is the square Toeplitz matrix with diagonals (-1, 2, -1): its
    first and last rows read the series as zero outside the mode, so they
    also charge the level at both ends. ``free`` keeps the n - 2 interior
    rows only and leaves constant and linear columns unpenalized.
    """

    n: int
    boundary: Literal["fixed", "free"] = "fixed"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ArgumentError(f"operator size must be positive, got {self.n}")
        if self.boundary not in ("fixed", "free"):
            raise ArgumentError(f"unknown boundary {self.boundary!r}")

    @cached_property
    def gamma(self) -> Matrix:
        column = np.zeros(self.n)
        column[0] = 2.0
        if self.n > 1:
            column[1] = -1.0
        G = linalg.toeplitz(column)
        if self.boundary == "free":
            G = G[1:-1] if self.n >= 3 else np.zeros((0, self.n))
        G = np.ascontiguousarray(G)
        G.flags.writeable = False
        return G

    @cached_property
    def gram(self) -> Matrix:
        """Gamma^T Gamma."""
        G = self.gamma.T @ self.gamma
        G.flags.writeable = False
        return G

    @cached_property
    def spectral_bound(self) -> float:
        """lambda_max(Gamma^T Gamma).

        Closed form (2 + 2 cos(pi / (n + 1)))^2 for ``fixed``; for ``free`` a
        dense eigenvalue inflated by (1 + eig_tol), and 0 when n < 3.
        """
        if self.boundary == "fixed":
            return float((2.0 + 2.0 * np.cos(np.pi / (self.n + 1))) ** 2)
        if self.n < 3:
            return 0.0
        return largest_eig(self.gram, method="dense") * (1.0 + settings.eig_tol)


GraphLike = Union[LocationGraph, Matrix]


def _laplacian_of(L: GraphLike) -> Matrix:
    if isinstance(L, LocationGraph):
        return L.laplacian
    return _square(L, "laplacian")


def graph_reg(A: Matrix, L: GraphLike, rho_a: float) -> tuple[float, Matrix]:
    """rho_a * tr(A^T L A) and its gradient 2 rho_a L A."""
    lap = _laplacian_of(L)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != lap.shape[0]:
        raise ArgumentError(f"factor with shape {A.shape} does not match a {lap.shape[0]}-node graph")
    LA = lap @ A
    value = max(rho_a * float(np.sum(A * LA)), 0.0)
    return value, 2.0 * rho_a * LA


def smooth_reg(M: Matrix, gamma: Union[SmoothnessOperator, Matrix], rho: float) -> tuple[float, Matrix]:
    """rho * ||Gamma M||_F^2 and its gradient 2 rho Gamma^T Gamma M."""
    G = gamma.gamma if isinstance(gamma, SmoothnessOperator) else np.asarray(gamma, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or G.ndim != 2 or G.shape[1] != M.shape[0]:
        raise ArgumentError(f"operator of shape {G.shape} cannot act on a factor of shape {M.shape}")
    GM = G @ M
    value = rho * float(np.sum(GM * GM))
    return value, 2.0 * rho * (G.T @ GM)


def hadamard_gram(factors: Iterable[Matrix], weights: NDArray[np.float64] | None = None) -> Matrix:
    """H^T H for H = khatri_rao(factors), as the elementwise product of F x F Grams.

    ``weights`` scales the rows of the last factor on one side only, giving
    H^T diag(w) H.
    """
    mats = list(factors)
    G = np.ones((mats[0].shape[1], mats[0].shape[1]))
    for n, M in enumerate(mats):
        if weights is not None and n == len(mats) - 1:
            G *= M.T @ (weights[:, None] * M)
        else:
            G *= M.T @ M
    return G
