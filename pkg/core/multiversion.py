"""Multi-version data model: update events, the update tensor and its age mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from config import get_logger
from core.errors import ArgumentError, IngestionError
from core.tensor_core import ObservationMask, Tensor4, TensorLike, _as_array

logger = get_logger(__name__)


@dataclass(frozen=True, slots=True)
class UpdateEvent:
    """One ingested record: ``count`` new items for (location, feature, gd) loaded on ``ld``."""

    location: int
    feature: int
    gd: int
    ld: int
    count: float


def _column(values: Iterable, dtype: type) -> np.ndarray:
    arr = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=dtype)
    arr = arr.reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EventLog:
    """Columnar event log; row ``r`` is one :class:`UpdateEvent`."""

    location: NDArray[np.int64]
    feature: NDArray[np.int64]
    gd: NDArray[np.int64]
    ld: NDArray[np.int64]
    count: NDArray[np.float64]

    def __post_init__(self) -> None:
        for name in ("location", "feature", "gd", "ld"):
            object.__setattr__(self, name, _column(getattr(self, name), np.int64))
        object.__setattr__(self, "count", _column(self.count, np.float64))
        lengths = {len(getattr(self, n)) for n in ("location", "feature", "gd", "ld", "count")}
        if len(lengths) != 1:
            raise ArgumentError(f"event columns differ in length: {sorted(lengths)}")

    def __len__(self) -> int:
        return int(self.count.shape[0])

    @classmethod
    def empty(cls) -> EventLog:
        return cls(*([np.zeros(0, dtype=np.int64)] * 4), np.zeros(0))  # type: ignore[arg-type]

    @classmethod
    def from_events(cls, events: Iterable[UpdateEvent]) -> EventLog:
        rows = list(events)
        return cls(
            [e.location for e in rows],  # type: ignore[arg-type]
            [e.feature for e in rows],  # type: ignore[arg-type]
            [e.gd for e in rows],  # type: ignore[arg-type]
            [e.ld for e in rows],  # type: ignore[arg-type]
            [e.count for e in rows],  # type: ignore[arg-type]
        )

    def to_events(self) -> list[UpdateEvent]:
        return [
            UpdateEvent(int(i), int(j), int(g), int(t), float(c))
            for i, j, g, t, c in zip(self.location, self.feature, self.gd, self.ld, self.count)
        ]

    def select(self, keep: NDArray[np.bool_]) -> EventLog:
        return EventLog(
            self.location[keep], self.feature[keep], self.gd[keep], self.ld[keep], self.count[keep]
        )

    def concat(self, other: EventLog) -> EventLog:
        return EventLog(
            np.concatenate([self.location, other.location]),
            np.concatenate([self.feature, other.feature]),
            np.concatenate([self.gd, other.gd]),
            np.concatenate([self.ld, other.ld]),
            np.concatenate([self.count, other.count]),
        )

    def sorted_by_ld(self) -> EventLog:
        order = np.argsort(self.ld, kind="stable")
        return EventLog(
            self.location[order], self.feature[order], self.gd[order], self.ld[order], self.count[order]
        )


Events = Union[EventLog, Sequence[UpdateEvent]]


@dataclass(frozen=True, eq=False)
class MultiVersionDataset:
    """Update tensor X_t (I x J x K x S_t) with its age mask, at a given horizon."""

    n_locations: int
    n_features: int
    K: int
    horizon: int
    epoch: int
    events: EventLog
    update_tensor: Tensor4
    mask: ObservationMask

    @property
    def S(self) -> int:
        return self.horizon - self.epoch + 1

    @property
    def n_full_slabs(self) -> int:
        """Slabs 0 .. S-K are fully observed (GDs 1 .. S-K+1)."""
        return max(self.S - self.K + 1, 0)

    @property
    def gds(self) -> NDArray[np.int64]:
        return np.arange(self.epoch, self.horizon + 1, dtype=np.int64)

    @property
    def underreported_gds(self) -> NDArray[np.int64]:
        return self.gds[self.n_full_slabs :]

    def slab_of(self, gd: int) -> int:
        s = int(gd) - self.epoch
        if not 0 <= s < self.S:
            raise ArgumentError(f"GD {gd} outside [{self.epoch}, {self.horizon}]")
        return s


def age_bitmap(K: int, S: int) -> NDArray[np.bool_]:
    """(K, S) bitmap: update k (0-based) of slab s is loaded iff k + s <= S - 1."""
    return (np.arange(K)[:, None] + np.arange(S)[None, :]) <= S - 1


def _validate(log: EventLog, n_locations: int, n_features: int, epoch: int) -> None:
    checks = [
        (~np.isfinite(log.count) | (log.count < 0), "count must be a finite nonnegative number"),
        (log.ld < log.gd, "loading date precedes generation date"),
        ((log.location < 0) | (log.location >= n_locations), f"location outside [0, {n_locations})"),
        ((log.feature < 0) | (log.feature >= n_features), f"feature outside [0, {n_features})"),
        (log.gd < epoch, f"generation date before epoch {epoch}"),
    ]
    for bad, message in checks:
        if bad.any():
            record = int(np.flatnonzero(bad)[0])
            raise IngestionError(message, record=record)


def _as_log(events: Events) -> EventLog:
    return events if isinstance(events, EventLog) else EventLog.from_events(events)


def _update_slot(log: EventLog, K: int) -> NDArray[np.int64]:
    """Zero-based update slot of every event; stragglers past slot K - 1 land in it."""
    lag = log.ld - log.gd
    stragglers = int(np.count_nonzero(lag >= K))
    if stragglers:
        logger.debug("stragglers_folded", events=stragglers, K=K)
    return np.minimum(lag, K - 1)


def ingest(
    events: Events,
    K: int,
    horizon: int,
    *,
    n_locations: int | None = None,
    n_features: int | None = None,
    epoch: int = 1,
) -> MultiVersionDataset:
    """Build X_t and its mask from an event log replayed up to ``horizon``.

    Update index k = ld - gd + 1; stragglers with k > K are summed into slot K,
    which is observed from LD gd + K - 1 on, so a straggler changes an
    already observed entry of that slot. Events loaded after ``horizon`` are
    left out. Duplicates are summed.
    """
    if K < 1:
        raise ArgumentError(f"K must be at least 1, got {K}")
    if horizon < epoch:
        raise ArgumentError(f"horizon {horizon} precedes epoch {epoch}")
    log = _as_log(events)
    if n_locations is None or n_features is None:
        if not len(log):
            raise ArgumentError("cannot infer dimensions from an empty event log")
        n_locations = n_locations or int(log.location.max()) + 1
        n_features = n_features or int(log.feature.max()) + 1
    _validate(log, n_locations, n_features, epoch)

    log = log.select(log.ld <= horizon)
    S = horizon - epoch + 1
    values = np.zeros((n_locations, n_features, K, S))
    k = _update_slot(log, K)
    np.add.at(values, (log.location, log.feature, k, log.gd - epoch), log.count)

    ds = MultiVersionDataset(
        n_locations=n_locations,
        n_features=n_features,
        K=K,
        horizon=horizon,
        epoch=epoch,
        events=log,
        update_tensor=Tensor4(values),
        mask=ObservationMask.from_slab_bitmap(n_locations, n_features, age_bitmap(K, S)),
    )
    logger.debug("dataset_ingested", events=len(log), dims=ds.update_tensor.dims, horizon=horizon)
    return ds


def extend(ds: MultiVersionDataset, events: Events, horizon: int) -> MultiVersionDataset:
    """Replay ``ds`` forward to ``horizon`` with the events loaded after ``ds.horizon``.

    Equivalent to re-ingesting the concatenated log, without touching old events.
    Returns a new dataset; ``ds`` is unchanged.
    """
    if horizon < ds.horizon:
        raise ArgumentError(f"cannot replay backwards from {ds.horizon} to {horizon}")
    log = _as_log(events)
    _validate(log, ds.n_locations, ds.n_features, ds.epoch)
    log = log.select((log.ld > ds.horizon) & (log.ld <= horizon))

    S = horizon - ds.epoch + 1
    values = np.zeros((ds.n_locations, ds.n_features, ds.K, S))
    values[..., : ds.S] = ds.update_tensor.values
    k = _update_slot(log, ds.K)
    np.add.at(values, (log.location, log.feature, k, log.gd - ds.epoch), log.count)

    return MultiVersionDataset(
        n_locations=ds.n_locations,
        n_features=ds.n_features,
        K=ds.K,
        horizon=horizon,
        epoch=ds.epoch,
        events=ds.events.concat(log),
        update_tensor=Tensor4(values),
        mask=ObservationMask.from_slab_bitmap(ds.n_locations, ds.n_features, age_bitmap(ds.K, S)),
    )


def aggregate(ds: MultiVersionDataset) -> NDArray[np.float64]:
    """Received totals Z_t(i, j, s): sum of the observed updates."""
    observed = np.where(ds.mask.dense(), ds.update_tensor.values, 0.0)
    return observed.sum(axis=2)


def marginalize(X_hat: TensorLike) -> NDArray[np.float64]:
    """Estimate Z_hat(i, j, s) by summing a completed update tensor over k."""
    return _as_array(X_hat).sum(axis=2)


def naive_estimate(ds: MultiVersionDataset) -> NDArray[np.float64]:
    """Baseline that takes the data received so far at face value."""
    return aggregate(ds)
