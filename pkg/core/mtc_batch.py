"""Batch multi-version tensor completion.

The solver alternates extrapolated projected-gradient (prox-linear) updates of
A, B, C and D against an auxiliary tensor Y with imputation of Y from the
model. Y equals the data on the observed set and the reconstruction elsewhere,
so every objective value recorded after imputation is the weighted masked fit
plus the regularizers.

A, B and C are kept at unit column norm and D carries each column's scale.

All arithmetic runs on data divided by ``scale`` (its observed maximum when
``SolverConfig.normalize`` is on); results are converted back by scaling D.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from config import get_logger, settings
from core.errors import ArgumentError, SolverDivergenceError, UnsupportedShapeError
from core.multiversion import MultiVersionDataset, aggregate, marginalize
from core.regularization import (
    LocationGraph,
    SmoothnessOperator,
    graph_reg,
    hadamard_gram,
    largest_eig,
    smooth_reg,
)
from core.schemas import SolverConfig
from core.tensor_core import FactorSet, Matrix, khatri_rao, mttkrp, normalize_columns, reconstruct_values

logger = get_logger(__name__)

MODES = ("A", "B", "C", "D")
_TINY = np.finfo(float).tiny


def build_weighting(alpha: float, S: int, K: int) -> NDArray[np.float64]:
    """Per-slab weights: sqrt(alpha) on GDs 1..S-K+1, sqrt(1 - alpha) after."""
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    if S < 1 or K < 1:
        raise ArgumentError(f"S and K must be positive, got S={S}, K={K}")
    weights = np.full(S, np.sqrt(1.0 - alpha))
    weights[: max(S - K + 1, 0)] = np.sqrt(alpha)
    return weights


def momentum_step(e: float) -> tuple[float, float]:
    """Advance the extrapolation sequence: returns (e', nu) with nu in [0, 1)."""
    if e < 0:
        raise ArgumentError(f"momentum sequence must be nonnegative, got {e}")
    e_next = (1.0 + np.sqrt(4.0 * e * e + 1.0)) / 2.0
    nu = min(max((e - 1.0) / e_next, 0.0), np.nextafter(1.0, 0.0))
    return float(e_next), float(nu)


def _nonnegative(V: Matrix) -> Matrix:
    return np.maximum(V, 0.0)


def unit_column_projection(V: Matrix) -> Matrix:
    """Nearest matrix with nonnegative unit-norm columns.

    A column without a positive entry maps to the unit vector at its largest entry.
    """
    P = np.maximum(V, 0.0)
    norms = np.linalg.norm(P, axis=0)
    empty = norms == 0.0
    P /= np.where(empty, 1.0, norms)
    if empty.any():
        cols = np.flatnonzero(empty)
        P[:, cols] = 0.0
        P[np.argmax(V[:, cols], axis=0), cols] = 1.0
    return P


def nnls_projected_gradient(
    G: Matrix,
    b: NDArray[np.float64],
    *,
    tol: float,
    max_iter: int,
    x0: NDArray[np.float64] | None = None,
) -> tuple[NDArray[np.float64], int]:
    """Minimize x^T G x / 2 - b^T x over x >= 0 by projected gradient, step 1/lambda_max(G).

    Starts from the clipped least-squares solution unless ``x0`` is given.
    Returns the solution and the number of iterations used.
    """
    n = G.shape[0]
    lip = largest_eig(G) * (1.0 + settings.eig_tol)
    if lip <= 0.0:
        return np.zeros(n), 0
    if x0 is None:
        x0 = np.linalg.lstsq(G, b, rcond=None)[0]
    x = np.maximum(np.asarray(x0, dtype=np.float64), 0.0)
    for iteration in range(1, max_iter + 1):
        x_new = np.maximum(x - (G @ x - b) / lip, 0.0)
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        if step <= tol * max(float(np.linalg.norm(x)), 1.0):
            return x, iteration
    return x, max_iter


@dataclass
class Diagnostics:
    """Traces and timings of one solve."""

    objective_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    iteration_seconds: list[float] = field(default_factory=list)
    iterations: int = 0
    init_sweeps: int = 0
    restarts: int = 0
    converged: bool = False
    stop_reason: str = "not_started"
    phase_seconds: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def warn(self, event: str, message: str, **context: object) -> None:
        self.warnings.append(message)
        logger.warning(event, message=message, **context)

    def to_frame(self) -> pd.DataFrame:
        """One row per recorded objective: iter, objective, residual, seconds."""
        n = len(self.objective_trace)
        residual = [np.nan] + list(self.residual_trace)
        seconds = [self.phase_seconds.get("init", np.nan)] + list(self.iteration_seconds)
        return pd.DataFrame(
            {
                "iter": np.arange(n),
                "objective": self.objective_trace,
                "residual": residual[:n],
                "seconds": seconds[:n],
            }
        )


@dataclass
class SolverState:
    """Working state of the coordinate loop.

    ``weights`` holds the squared slab weights applied to the data term;
    the initialization reuses the loop with unit weights and no regularizer.
    """

    factors: list[Matrix]
    previous: list[Matrix]
    Y: np.ndarray
    weights: NDArray[np.float64]
    regularize: bool = True
    literal: bool = False
    e: float = 0.0
    nu: float = 0.0
    iteration: int = 0
    steps: dict[str, float] = field(default_factory=dict)

    def drop_extrapolation(self) -> None:
        self.e = 0.0
        self.nu = 0.0
        self.previous = list(self.factors)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted factors in data units, the model estimate and the hybrid estimate.

    ``hybrid`` keeps the received totals for fully reported GDs and the model
    estimate for the under-reported ones.
    """

    factors: FactorSet
    estimate: NDArray[np.float64]
    hybrid: NDArray[np.float64]
    diagnostics: Diagnostics
    scale: float
    config: SolverConfig

    def scaled_factors(self) -> FactorSet:
        """Factors in the solver's normalized units."""
        return self.factors.replace(D=self.factors.D / self.scale)


class MTCSolver:
    """Problem constants and the update rules for one dataset."""

    def __init__(
        self,
        ds: MultiVersionDataset,
        graph: Optional[LocationGraph] = None,
        cfg: Optional[SolverConfig] = None,
        *,
        scale: float | None = None,
    ):
        self.ds = ds
        self.cfg = cfg or SolverConfig()
        I, J, K, S = ds.update_tensor.dims
        if graph is None:
            graph = LocationGraph.empty(I)
        if graph.n != I:
            raise ArgumentError(f"graph has {graph.n} nodes but the data has {I} locations")
        self.graph = graph

        raw = ds.update_tensor.values
        if scale is None:
            peak = float(raw.max())
            scale = peak if self.cfg.normalize and peak > 0 else 1.0
        if not np.isfinite(scale) or scale <= 0:
            raise ArgumentError(f"data scale must be positive, got {scale}")
        self.scale = float(scale)
        self.X = raw / self.scale
        self.mask = ds.mask.dense()
        self.fully_observed = ds.mask.count() == self.X.size
        self.w2 = build_weighting(self.cfg.alpha, S, K) ** 2
        self.n_full = ds.n_full_slabs
        self.smooth_C = SmoothnessOperator(K, self.cfg.smooth_boundary)
        self.smooth_D = SmoothnessOperator(S, self.cfg.smooth_boundary)
        self.data_norm = float(np.linalg.norm(np.where(self.mask, self.X, 0.0)))

        rho_a, rho = self.cfg.rho_a, self.cfg.rho
        self.reg_bound = {
            "A": 2.0 * rho_a * graph.spectral_bound if rho_a > 0 else 0.0,
            "B": 0.0,
            "C": 2.0 * rho * self.smooth_C.spectral_bound if rho > 0 else 0.0,
            "D": 2.0 * rho * self.smooth_D.spectral_bound if rho > 0 else 0.0,
        }

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.ds.update_tensor.dims

    def new_state(self, factors: Sequence[Matrix]) -> SolverState:
        """Fresh state at ``factors``, rescaled to unit A, B, C columns, with Y imputed from them."""
        factors = normalize_columns(factors)
        return SolverState(
            factors=factors,
            previous=list(factors),
            Y=self.impute_Y(factors),
            weights=self.w2,
            literal=self.cfg.literal_update,
        )

    # Gradients and updates

    def gradient(self, mode: str, factors: Sequence[Matrix], state: SolverState) -> tuple[Matrix, float]:
        """Gradient of the objective in one factor at ``factors`` and its Lipschitz bound."""
        if mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
        n = MODES.index(mode)
        w2 = state.weights
        A, B, C, D = factors
        tol = self.cfg.eig_tol
        if mode == "D":
            G = hadamard_gram([A, B, C])
            YH = mttkrp(state.Y, [A, B, C], 4)
            grad = 2.0 * w2[:, None] * (D @ G - YH)
            lip = 2.0 * float(w2.max()) * largest_eig(G, tol)
        else:
            others = [M for m, M in zip(MODES, factors) if m != mode]
            G = hadamard_gram(others, weights=w2)
            YH = mttkrp(state.Y, [others[0], others[1], w2[:, None] * D], n + 1)
            grad = 2.0 * (factors[n] @ G - YH)
            lip = 2.0 * largest_eig(G, tol)
        lip *= 1.0 + tol

        if state.regularize:
            if mode == "A" and self.cfg.rho_a > 0:
                grad = grad + graph_reg(A, self.graph, self.cfg.rho_a)[1]
            elif mode == "C" and self.cfg.rho > 0:
                grad = grad + smooth_reg(C, self.smooth_C, self.cfg.rho)[1]
            elif mode == "D" and self.cfg.rho > 0:
                grad = grad + smooth_reg(D, self.smooth_D, self.cfg.rho)[1]
            lip += self.reg_bound[mode]
        return grad, lip

    def update_factor(self, mode: str, state: SolverState) -> tuple[Matrix, float]:
        """One extrapolated prox-linear step for ``mode``.

        A, B and C are projected onto nonnegative unit columns and D onto the
        nonnegative orthant, so the column scale lives in D alone. Returns the
        new factor and the prox-gradient mapping norm gamma * ||M+ - M_hat||.
        """
        n = MODES.index(mode)
        M = state.factors[n]
        M_hat = M + state.nu * (M - state.previous[n]) if state.nu else M
        point = list(state.factors)
        point[n] = M_hat
        grad, gamma = self.gradient(mode, point, state)
        if not np.isfinite(grad).all() or not np.isfinite(gamma):
            raise SolverDivergenceError(mode, state.iteration)
        state.steps[mode] = gamma
        project = _nonnegative if mode == "D" else unit_column_projection
        if gamma <= 0.0:
            return project(M_hat), 0.0
        if state.literal:
            new = M - grad / gamma
        else:
            new = project(M_hat - grad / gamma)
        return new, gamma * float(np.linalg.norm(new - M_hat))

    def coordinate_round(self, state: SolverState) -> float:
        """Update A, B, C, D in order; returns the summed mapping norms."""
        before = list(state.factors)
        mapping = 0.0
        for n, mode in enumerate(MODES):
            state.factors[n], norm = self.update_factor(mode, state)
            mapping += norm
        state.previous = before
        return mapping

    def outer_iteration(self, state: SolverState) -> tuple[float, float]:
        """One coordinate round followed by imputation; returns (objective, mapping norm)."""
        mapping = self.coordinate_round(state)
        recon = reconstruct_values(*state.factors)
        state.Y = np.where(self.mask, self.X, recon)
        value = self.objective(state.factors, state.Y, recon=recon)
        if not np.isfinite(value):
            raise SolverDivergenceError("objective", state.iteration)
        return value, mapping

    def impute_Y(self, factors: Sequence[Matrix]) -> np.ndarray:
        """Observed entries from the data, the rest from the reconstruction."""
        return np.where(self.mask, self.X, reconstruct_values(*factors))

    def objective(
        self,
        factors: Sequence[Matrix],
        Y: np.ndarray | None = None,
        *,
        weights: NDArray[np.float64] | None = None,
        regularize: bool = True,
        recon: np.ndarray | None = None,
    ) -> float:
        """alpha F1 + (1 - alpha) F2 against Y plus the regularizers.

        ``recon`` is the reconstruction of ``factors`` when the caller already has it.
        """
        w2 = self.w2 if weights is None else weights
        recon = reconstruct_values(*factors) if recon is None else recon
        Y = np.where(self.mask, self.X, recon) if Y is None else Y
        diff = Y - recon
        value = float(np.einsum("ijks,ijks,s->", diff, diff, w2))
        if regularize:
            A, _, C, D = factors
            if self.cfg.rho_a > 0:
                value += graph_reg(A, self.graph, self.cfg.rho_a)[0]
            if self.cfg.rho > 0:
                value += smooth_reg(C, self.smooth_C, self.cfg.rho)[0]
                value += smooth_reg(D, self.smooth_D, self.cfg.rho)[0]
        return value

    def residual(self, mapping: float) -> float:
        return mapping / max(self.data_norm, _TINY)

    # Initialization

    def slab_normal_equations(
        self, A: Matrix, B: Matrix, C: Matrix, s: int, *, masked: bool = True
    ) -> tuple[Matrix, NDArray[np.float64]]:
        """Gram matrix and right-hand side of the least-squares fit of row d_s.

        With ``masked`` only the observed entries of slab ``s`` enter the fit;
        otherwise unobserved entries count as zeros.
        """
        X_s = self.X[..., s]
        if not masked:
            return hadamard_gram([A, B, C]), np.einsum("ijk,if,jf,kf->f", X_s, A, B, C)
        if self.ds.mask.is_uniform:
            seen = self.ds.mask.bits[:, s]
            C_seen = C[seen]
            G = hadamard_gram([A, B, C_seen]) if seen.any() else np.zeros((A.shape[1],) * 2)
            b = np.einsum("ijk,if,jf,kf->f", X_s[:, :, seen], A, B, C_seen)
            return G, b
        rows = self.mask[..., s].reshape(-1)
        H = khatri_rao([A, B, C])[rows]
        return H.T @ H, H.T @ X_s.reshape(-1)[rows]

    def _check_rank(self, diag: Diagnostics) -> None:
        I, J, K, _ = self.dims
        dims = (I, J, K, self.n_full)
        total = int(np.prod(dims))
        smaller = [min(d, total // d) for d in dims]
        if self.cfg.rank > max(smaller):
            diag.warn(
                "rank_exceeds_dimensions",
                f"rank {self.cfg.rank} exceeds every unfolding's smaller dimension {smaller}",
                rank=self.cfg.rank,
            )

    def init_factors(self, diag: Diagnostics | None = None) -> FactorSet:
        """Nonnegative CP on the fully observed GDs, then masked NNLS for the rest of D.

        Returns factors in normalized units.
        """
        diag = diag if diag is not None else Diagnostics()
        I, J, K, S = self.dims
        F = self.cfg.rank
        if S < K:
            raise UnsupportedShapeError(f"{S} GDs leave no fully observed slab for K = {K}")
        self._check_rank(diag)
        n_full = self.n_full
        X_full = np.ascontiguousarray(self.X[..., :n_full])

        rng = np.random.default_rng(self.cfg.seed)
        factors = [rng.uniform(size=(d, F)) for d in (I, J, K, n_full)]
        recon_norm = float(np.linalg.norm(reconstruct_values(*factors)))
        data_norm = float(np.linalg.norm(X_full))
        if data_norm == 0.0:
            factors = [np.zeros_like(M) for M in factors]
        elif recon_norm > 0.0:
            c = (data_norm / recon_norm) ** 0.25
            factors = [c * M for M in factors]
        factors = normalize_columns(factors)

        state = SolverState(
            factors=factors,
            previous=list(factors),
            Y=X_full,
            weights=np.ones(n_full),
            regularize=False,
        )
        obj = self.objective(factors, X_full, weights=state.weights, regularize=False)
        fista = self.cfg.momentum == "fista"
        sweep = 0
        for sweep in range(1, self.cfg.init_iters + 1):
            state.iteration = sweep
            e_next, state.nu = momentum_step(state.e) if fista else (0.0, 0.0)
            self.coordinate_round(state)
            new_obj = self.objective(state.factors, X_full, weights=state.weights, regularize=False)
            if fista and new_obj > obj * (1.0 + self.cfg.restart_tol):
                state.drop_extrapolation()
            else:
                state.e = e_next
            stalled = abs(obj - new_obj) <= self.cfg.tol_rel_obj * max(abs(obj), _TINY)
            obj = new_obj
            if stalled:
                break
        diag.init_sweeps = sweep

        A, B, C, D_full = state.factors
        rows = []
        for s in range(n_full, S):
            G, b = self.slab_normal_equations(A, B, C, s)
            d, _ = nnls_projected_gradient(G, b, tol=self.cfg.nnls_tol, max_iter=self.cfg.nnls_iters)
            rows.append(d)
        D = np.vstack([D_full, *rows]) if rows else D_full
        logger.debug("factors_initialized", sweeps=sweep, objective=obj, nnls_rows=len(rows))
        return FactorSet(A, B, C, D)

    # Driver

    def fit(self) -> FitResult:
        cfg = self.cfg
        diag = Diagnostics()
        logger.info(
            "fit_started",
            dims=self.dims,
            rank=cfg.rank,
            alpha=cfg.alpha,
            rho_a=cfg.rho_a,
            rho=cfg.rho,
            momentum=cfg.momentum,
        )
        started = time.perf_counter()
        factors = self.init_factors(diag).as_list()
        diag.phase_seconds["init"] = time.perf_counter() - started

        if self.fully_observed:
            diag.objective_trace.append(self.objective(factors))
            diag.converged = True
            diag.stop_reason = "fully_observed"
            logger.info("fit_completed", iterations=0, stop_reason=diag.stop_reason)
            return self._result(factors, diag, estimate=aggregate(self.ds))

        state = self.new_state(factors)
        obj = self.objective(state.factors, state.Y)
        diag.objective_trace.append(obj)
        fista = cfg.momentum == "fista"
        loop_started = time.perf_counter()

        for it in range(1, cfg.max_outer_iters + 1):
            tick = time.perf_counter()
            state.iteration = it
            e_next, state.nu = momentum_step(state.e) if fista else (0.0, 0.0)
            new_obj, mapping = self.outer_iteration(state)

            if fista and new_obj > obj * (1.0 + cfg.restart_tol):
                state.drop_extrapolation()
                diag.restarts += 1
                logger.debug("momentum_restart", iteration=it, objective=new_obj, previous=obj)
            else:
                state.e = e_next

            change = abs(obj - new_obj) / max(abs(obj), _TINY)
            obj = new_obj
            residual = self.residual(mapping)
            diag.objective_trace.append(obj)
            diag.residual_trace.append(residual)
            diag.iteration_seconds.append(time.perf_counter() - tick)
            diag.iterations = it
            logger.debug("outer_iteration", iteration=it, objective=obj, residual=residual, nu=state.nu)

            if residual <= cfg.tol_station:
                diag.converged, diag.stop_reason = True, "stationary"
                break
            if change <= cfg.tol_rel_obj:
                diag.converged, diag.stop_reason = True, "objective_change"
                break
        else:
            if cfg.max_outer_iters > 0:
                diag.stop_reason = "max_iterations"
                diag.warn(
                    "max_iterations_reached",
                    f"stopped after {cfg.max_outer_iters} iterations without meeting a tolerance",
                    residual=diag.residual_trace[-1],
                )
            else:
                diag.stop_reason = "init_only"

        diag.phase_seconds["iterations"] = time.perf_counter() - loop_started
        diag.phase_seconds["total"] = time.perf_counter() - started
        logger.info(
            "fit_completed",
            iterations=diag.iterations,
            stop_reason=diag.stop_reason,
            objective=obj,
            restarts=diag.restarts,
            seconds=round(diag.phase_seconds["total"], 3),
        )
        return self._result(state.factors, diag)

    def _result(
        self, factors: Sequence[Matrix], diag: Diagnostics, estimate: NDArray[np.float64] | None = None
    ) -> FitResult:
        A, B, C, D = factors
        theta = FactorSet(A, B, C, D * self.scale)
        if estimate is None:
            estimate = marginalize(reconstruct_values(*theta.as_list()))
        hybrid = np.array(estimate, copy=True)
        hybrid[..., : self.n_full] = aggregate(self.ds)[..., : self.n_full]
        return FitResult(
            factors=theta,
            estimate=estimate,
            hybrid=hybrid,
            diagnostics=diag,
            scale=self.scale,
            config=self.cfg,
        )


def init_factors(
    ds: MultiVersionDataset,
    cfg: Optional[SolverConfig] = None,
    graph: Optional[LocationGraph] = None,
) -> FactorSet:
    """Initial factors in data units."""
    solver = MTCSolver(ds, graph, cfg)
    theta = solver.init_factors()
    return theta.replace(D=theta.D * solver.scale)


def fit(
    ds: MultiVersionDataset,
    graph: Optional[LocationGraph] = None,
    cfg: Optional[SolverConfig] = None,
) -> FitResult:
    """Initialize and run the alternating solver to a stopping rule."""
    return MTCSolver(ds, graph, cfg).fit()
