"""Synthetic multi-version data with known ground truth.

Ground truth is drawn in-model (nonnegative rank F), split into K update
increments by a delay profile and emitted as an event log in which the
newest GDs are missing their later updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.ndimage import uniform_filter1d

from config import get_logger
from core.errors import ArgumentError
from core.multiversion import EventLog
from core.regularization import LocationGraph
from core.schemas import GeneratorConfig
from core.tensor_core import FactorSet, Tensor4, TensorLike, _as_array

logger = get_logger(__name__)

SMOOTHING_WINDOW = 5
SMOOTHING_PASSES = 3
TRUTH_COLUMNS = ["location", "feature", "gd", "true_count"]


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Planted factors, true totals Z (I x J x S) and, with communities, the planted graph."""

    factors: FactorSet
    totals: NDArray[np.float64]
    graph: Optional[LocationGraph] = None
    labels: Optional[NDArray[np.int64]] = None


@dataclass(frozen=True, eq=False)
class SyntheticData:
    truth: GroundTruth
    updates: Tensor4
    events: EventLog
    withheld: pd.DataFrame
    horizon: int
    epoch: int


def ground_truth_from_factors(factors: FactorSet) -> NDArray[np.float64]:
    """Z(i, j, s) = sum_f A(i,f) B(j,f) D(s,f) (sum_k C(k,f))."""
    return np.einsum("if,jf,sf,f->ijs", factors.A, factors.B, factors.D, factors.C.sum(axis=0))


def _community_factor(cfg: GeneratorConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(cfg.I) % cfg.communities
    centroids = rng.uniform(size=(cfg.communities, cfg.F))
    A = centroids[labels] + cfg.community_spread * rng.standard_normal((cfg.I, cfg.F))
    return np.clip(A, 0.0, None), labels


def community_graph(labels: NDArray[np.int64]) -> LocationGraph:
    """Unit-weight edges between every pair of locations sharing a label."""
    W = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(W, 0.0)
    return LocationGraph(W)


def gen_ground_truth(cfg: GeneratorConfig) -> GroundTruth:
    """Draw nonnegative factors from ``cfg.seed`` and the totals they imply."""
    rng = np.random.default_rng(cfg.seed)
    graph = labels = None
    if cfg.communities:
        A, labels = _community_factor(cfg, rng)
        graph = community_graph(labels)
    else:
        A = rng.uniform(size=(cfg.I, cfg.F))
    B = rng.uniform(size=(cfg.J, cfg.F))
    C = rng.uniform(size=(cfg.K, cfg.F))
    D = rng.uniform(size=(cfg.S, cfg.F))
    if cfg.factor_smoothness and cfg.S > 1:
        # repeated box filters approach a Gaussian kernel
        for _ in range(SMOOTHING_PASSES):
            D = uniform_filter1d(D, size=min(SMOOTHING_WINDOW, cfg.S), axis=0, mode="reflect")
    factors = FactorSet(A, B, C, D)

    totals = ground_truth_from_factors(factors)
    if cfg.mismatch_scale > 0:
        totals = totals + cfg.mismatch_scale * totals.mean() * rng.exponential(size=totals.shape)
    return GroundTruth(factors=factors, totals=totals, graph=graph, labels=labels)


def update_fractions(cfg: GeneratorConfig, shape: tuple[int, int, int], seed: int | None = None) -> np.ndarray:
    """Per-entry delay fractions, shape (I, J, S, K), nonnegative and summing to one."""
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    if cfg.concentration is not None:
        w = rng.dirichlet(cfg.concentration, size=shape)
    else:
        w = np.broadcast_to(np.asarray(cfg.profile), (*shape, cfg.K)).copy()
    if cfg.noise_scale > 0:
        w = w * rng.lognormal(mean=0.0, sigma=cfg.noise_scale, size=w.shape)
        w /= w.sum(axis=-1, keepdims=True)
    return w


def split_updates(Z: NDArray[np.float64], cfg: GeneratorConfig, seed: int | None = None) -> Tensor4:
    """Split totals into K increments; the last increment takes the remainder."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3:
        raise ArgumentError(f"totals must be 3-way, got {Z.ndim} dimensions")
    if (Z < 0).any():
        raise ArgumentError("totals must be nonnegative")
    w = update_fractions(cfg, Z.shape, seed)
    I, J, S = Z.shape
    X = np.zeros((I, J, cfg.K, S))
    received = np.zeros_like(Z)
    for k in range(cfg.K - 1):
        X[:, :, k, :] = Z * w[..., k]
        received = received + X[:, :, k, :]
    X[:, :, cfg.K - 1, :] = np.maximum(Z - received, 0.0)
    return Tensor4(X)


def truth_frame(Z: NDArray[np.float64], gds: NDArray[np.int64], epoch: int = 1) -> pd.DataFrame:
    """Long-format truth table for the given GDs."""
    Z = np.asarray(Z)
    gds = np.asarray(gds, dtype=np.int64)
    I, J, _ = Z.shape
    ii, jj, gg = np.meshgrid(np.arange(I), np.arange(J), gds, indexing="ij")
    values = Z[ii, jj, gg - epoch]
    return pd.DataFrame(
        {
            "location": ii.reshape(-1),
            "feature": jj.reshape(-1),
            "gd": gg.reshape(-1),
            "true_count": values.reshape(-1),
        },
        columns=TRUTH_COLUMNS,
    )


def emit_events(
    X: TensorLike,
    horizon: int,
    K: int | None = None,
    *,
    epoch: int = 1,
    totals: NDArray[np.float64] | None = None,
    all_gds: bool = False,
) -> tuple[EventLog, pd.DataFrame]:
    """Event log of the increments loaded by ``horizon`` plus the withheld truth.

    Update k (0-based) of GD g loads on g + k. Zero increments produce no
    event. The truth covers the last K - 1 GDs up to ``horizon`` (every GD up
    to ``horizon`` with ``all_gds``).
    """
    values = _as_array(X)
    I, J, K_x, S = values.shape
    K = K_x if K is None else K
    if K != K_x:
        raise ArgumentError(f"tensor has {K_x} update slots, expected {K}")
    if not epoch <= horizon <= epoch + S - 1:
        raise ArgumentError(f"horizon {horizon} outside [{epoch}, {epoch + S - 1}]")

    k_idx = np.arange(K)[:, None]
    gd = epoch + np.arange(S)[None, :]
    loaded = gd + k_idx <= horizon
    keep = loaded[None, None, :, :] & (values > 0)
    i, j, k, s = np.nonzero(keep)
    log = EventLog(i, j, epoch + s, epoch + s + k, values[i, j, k, s])

    Z = values.sum(axis=2) if totals is None else np.asarray(totals)
    first = epoch if all_gds else max(epoch, horizon - K + 2)
    withheld = truth_frame(Z, np.arange(first, horizon + 1), epoch)
    logger.debug("events_emitted", events=len(log), horizon=horizon, withheld=len(withheld))
    return log, withheld


def generate(cfg: GeneratorConfig, horizon: int | None = None, *, all_gds: bool = False) -> SyntheticData:
    """Ground truth, its update split and the event log, replayed to ``horizon``."""
    truth = gen_ground_truth(cfg)
    updates = split_updates(truth.totals, cfg)
    horizon = cfg.epoch + cfg.S - 1 if horizon is None else horizon
    events, withheld = emit_events(
        updates, horizon, cfg.K, epoch=cfg.epoch, totals=truth.totals, all_gds=all_gds
    )
    logger.info("synthetic_data_generated", dims=updates.dims, rank=cfg.F, events=len(events), seed=cfg.seed)
    return SyntheticData(
        truth=truth, updates=updates, events=events, withheld=withheld, horizon=horizon, epoch=cfg.epoch
    )
