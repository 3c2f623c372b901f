"""Online tracking of the factorization as new loading dates arrive.

Each arrival extends the dataset by one GD. The forward step fits the new row
of D against the fixed A, B, C; the backward step appends it, re-imputes Y and
refreshes every factor with a single coordinate round.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np
from numpy.typing import NDArray

from config import get_logger
from core.errors import ArgumentError, StreamError
from core.multiversion import EventLog, Events, MultiVersionDataset, _as_log, extend
from core.mtc_batch import FitResult, MTCSolver, fit, nnls_projected_gradient
from core.regularization import LocationGraph
from core.schemas import SolverConfig
from core.tensor_core import FactorSet

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class TrackerState:
    """Factors in normalized units for the dataset at ``dataset.horizon``."""

    factors: FactorSet
    dataset: MultiVersionDataset
    cfg: SolverConfig
    scale: float
    graph: Optional[LocationGraph] = None
    Y: Optional[np.ndarray] = None
    arrivals: int = 0

    @property
    def S(self) -> int:
        return self.dataset.S

    def window_gds(self) -> NDArray[np.int64]:
        """GDs still under-reported at the current horizon."""
        return self.dataset.underreported_gds

    def window_estimate(self) -> NDArray[np.float64]:
        """Z_hat for the under-reported window, shape (I, J, len(window)), in data units."""
        A, B, C, D = self.factors.as_list()
        start = self.dataset.n_full_slabs
        return np.einsum("if,jf,kf,sf->ijs", A, B, C, D[start:]) * self.scale

    def estimate(self) -> NDArray[np.float64]:
        return np.einsum("if,jf,kf,sf->ijs", *self.factors.as_list()) * self.scale


@dataclass(frozen=True)
class ForwardResult:
    d: NDArray[np.float64]
    iterations: int
    zero_slab: bool


@dataclass
class Arrival:
    """Outcome of one loading date."""

    ld: int
    gd: int
    window_gds: NDArray[np.int64]
    estimate: NDArray[np.float64]
    seconds: float
    fp_iters_used: int
    residual: float
    zero_slab: bool = False
    resynced: bool = False
    events: int = 0


def start(
    result: FitResult,
    ds: MultiVersionDataset,
    graph: Optional[LocationGraph] = None,
    cfg: Optional[SolverConfig] = None,
) -> TrackerState:
    """Tracker state from a batch fit of ``ds``."""
    theta = result.scaled_factors()
    if theta.D.shape[0] != ds.S:
        raise ArgumentError(f"fit has {theta.D.shape[0]} GD rows but the dataset has {ds.S}")
    cfg = cfg or result.config
    solver = MTCSolver(ds, graph, cfg, scale=result.scale)
    return TrackerState(
        factors=theta,
        dataset=ds,
        cfg=cfg,
        scale=result.scale,
        graph=graph,
        Y=solver.impute_Y(theta.as_list()),
    )


def fp_step(state: TrackerState, ds_next: MultiVersionDataset) -> ForwardResult:
    """Fit the newest GD row of ``ds_next`` with A, B, C held fixed.

    Only the observed entries of the new slab enter the fit unless
    ``literal_fp`` is set. An all-zero observed slab yields d = 0.
    """
    if ds_next.S != state.S + 1:
        raise ArgumentError(f"expected a dataset with {state.S + 1} GDs, got {ds_next.S}")
    solver = MTCSolver(ds_next, state.graph, state.cfg, scale=state.scale)
    A, B, C, _ = state.factors.as_list()
    s = ds_next.S - 1
    observed = ds_next.mask.slab(s)
    if not np.any(np.where(observed, ds_next.update_tensor.values[..., s], 0.0)):
        logger.info("fp_zero_slab", gd=int(ds_next.gds[s]))
        return ForwardResult(np.zeros(state.factors.rank), 0, True)
    G, b = solver.slab_normal_equations(A, B, C, s, masked=not state.cfg.literal_fp)
    d, used = nnls_projected_gradient(G, b, tol=state.cfg.fp_tol, max_iter=state.cfg.fp_iters)
    return ForwardResult(d, used, False)


def bp_step(
    state: TrackerState, ds_next: MultiVersionDataset, d: NDArray[np.float64]
) -> tuple[TrackerState, float]:
    """Append ``d`` to D, impute Y and run one coordinate round with momentum reset.

    Returns the new state and the round's stationarity residual.
    """
    d = np.asarray(d, dtype=np.float64).reshape(1, -1)
    if d.shape[1] != state.factors.rank:
        raise ArgumentError(f"row of length {d.shape[1]} does not match rank {state.factors.rank}")
    solver = MTCSolver(ds_next, state.graph, state.cfg, scale=state.scale)
    A, B, C, D = state.factors.as_list()
    work = solver.new_state([A, B, C, np.vstack([D, d])])
    work.iteration = state.arrivals + 1
    mapping = solver.coordinate_round(work)
    work.Y = solver.impute_Y(work.factors)
    new_state = replace(
        state,
        factors=FactorSet.from_list(work.factors),
        dataset=ds_next,
        Y=work.Y,
        arrivals=state.arrivals + 1,
    )
    return new_state, solver.residual(mapping)


def resync(state: TrackerState) -> TrackerState:
    """Replace the tracked factors with a batch fit of the current dataset."""
    result = fit(state.dataset, state.graph, state.cfg)
    theta = result.factors.replace(D=result.factors.D / state.scale)
    solver = MTCSolver(state.dataset, state.graph, state.cfg, scale=state.scale)
    return replace(state, factors=theta, Y=solver.impute_Y(theta.as_list()))


def advance(state: TrackerState, events: Events) -> tuple[TrackerState, Arrival]:
    """Process one loading date: the horizon moves forward by one GD."""
    tick = time.perf_counter()
    log = _as_log(events)
    ld = state.dataset.horizon + 1
    if len(log) and (log.ld != ld).any():
        raise StreamError(f"arrival for LD {ld} contains events loaded on other dates")
    ds_next = extend(state.dataset, log, ld)
    forward = fp_step(state, ds_next)
    new_state, residual = bp_step(state, ds_next, forward.d)
    resynced = False
    every = state.cfg.resync_every
    if every and new_state.arrivals % every == 0:
        new_state = resync(new_state)
        resynced = True
    arrival = Arrival(
        ld=ld,
        gd=ld,
        window_gds=new_state.window_gds(),
        estimate=new_state.window_estimate(),
        seconds=time.perf_counter() - tick,
        fp_iters_used=forward.iterations,
        residual=residual,
        zero_slab=forward.zero_slab,
        resynced=resynced,
        events=len(log),
    )
    logger.debug(
        "arrival_processed",
        ld=ld,
        events=len(log),
        fp_iters=forward.iterations,
        residual=residual,
        seconds=round(arrival.seconds, 4),
    )
    return new_state, arrival


def _check_order(log: EventLog, horizon: int) -> None:
    if len(log) > 1 and (np.diff(log.ld) < 0).any():
        at = int(np.flatnonzero(np.diff(log.ld) < 0)[0]) + 1
        raise StreamError(f"record {at}: loading date {int(log.ld[at])} after {int(log.ld[at - 1])}")
    if len(log) and int(log.ld[0]) <= horizon:
        raise StreamError(f"loading date {int(log.ld[0])} was already replayed (horizon {horizon})")


def stream(
    state: TrackerState, events: Events, until: int | None = None
) -> Iterator[tuple[TrackerState, Arrival]]:
    """Yield the state after every loading date from ``horizon + 1`` to ``until``.

    Events must be ordered by loading date. Loading dates without events are
    processed as empty arrivals.
    """
    log = _as_log(events)
    _check_order(log, state.dataset.horizon)
    last = int(log.ld[-1]) if len(log) else state.dataset.horizon
    until = last if until is None else until
    if len(log) and until < last:
        log = log.select(log.ld <= until)
    for ld in range(state.dataset.horizon + 1, until + 1):
        state, arrival = advance(state, log.select(log.ld == ld))
        yield state, arrival


def track(
    state: TrackerState, events: Events, until: int | None = None
) -> tuple[TrackerState, list[Arrival]]:
    """Replay a stream through the tracker, collecting every arrival."""
    arrivals = []
    for state, arrival in stream(state, events, until):
        arrivals.append(arrival)
    logger.info("tracking_completed", arrivals=len(arrivals), horizon=state.dataset.horizon)
    return state, arrivals
