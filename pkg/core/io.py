"""CSV, JSON and npz artifacts: event logs, truth and estimate tables, graphs, models."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from config import get_logger
from core.errors import ArgumentError, IngestionError
from core.mtc_batch import Diagnostics
from core.multiversion import EventLog
from core.regularization import LocationGraph
from core.synth import TRUTH_COLUMNS
from core.tensor_core import FactorSet

logger = get_logger(__name__)

EVENT_COLUMNS = ["location", "feature", "gd", "ld", "count"]
ESTIMATE_COLUMNS = ["gd", "location", "feature", "estimate"]
GRAPH_COLUMNS = ["u", "v", "weight"]
KEY = ["location", "feature", "gd"]

FLOAT_FORMAT = "%.17g"


INT64 = np.iinfo(np.int64)


def _read_csv(path: str | Path, **kwargs: Any) -> pd.DataFrame:
    try:
        return pd.read_csv(path, **kwargs)
    except pd.errors.EmptyDataError as exc:
        raise IngestionError(f"{path}: empty file") from exc
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path}: not UTF-8 text ({exc.reason} at byte {exc.start})") from exc
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def _parse_int(cell: str) -> int | None:
    """Exact integer value of ``cell``, which may be written as an integral float."""
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        value = float(cell)
    except ValueError:
        return None
    return int(value) if np.isfinite(value) and value == np.floor(value) else None


def _read_table(path: str | Path, columns: Sequence[str], integer: Sequence[str]) -> pd.DataFrame:
    """Read a headed CSV of numeric columns; bad cells raise with their line number.

    Floats are parsed exactly, so a table written with ``FLOAT_FORMAT`` reads
    back bit for bit. Integers outside the int64 range are invalid.
    """
    raw = _read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    header = [str(c).strip() for c in raw.columns]
    if header != list(columns):
        raise IngestionError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}", line=1)
    raw.columns = header

    frame = pd.DataFrame(index=raw.index)
    for col in columns:
        cells = raw[col].str.strip()
        if col in integer:
            parsed = [_parse_int(c) for c in cells]
            bad = np.array([v is None or not INT64.min <= v <= INT64.max for v in parsed], dtype=bool)
        else:
            bad = ~np.isfinite(pd.to_numeric(cells, errors="coerce").to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise IngestionError(f"{path}: invalid {col} {cells.iloc[row]!r}", record=row, line=row + 2)
        if col in integer:
            frame[col] = np.array(parsed, dtype=np.int64)
        else:
            frame[col] = cells.astype(np.float64)
    return frame


def _check_rows(path: str | Path, bad: pd.Series, message: str) -> None:
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(f"{path}: {message}", record=row, line=row + 2)


def read_events(path: str | Path) -> EventLog:
    """Parse an event CSV with header ``location,feature,gd,ld,count``."""
    frame = _read_table(path, EVENT_COLUMNS, ["location", "feature", "gd", "ld"])
    _check_rows(path, frame["count"] < 0, "count must be nonnegative")
    _check_rows(path, frame["ld"] < frame["gd"], "loading date precedes generation date")
    _check_rows(path, (frame["location"] < 0) | (frame["feature"] < 0), "negative index")
    logger.debug("events_read", path=str(path), events=len(frame))
    return EventLog(
        frame["location"].to_numpy(),
        frame["feature"].to_numpy(),
        frame["gd"].to_numpy(),
        frame["ld"].to_numpy(),
        frame["count"].to_numpy(),
    )


def write_events(log: EventLog, path: str | Path) -> None:
    frame = pd.DataFrame(
        {"location": log.location, "feature": log.feature, "gd": log.gd, "ld": log.ld, "count": log.count},
        columns=EVENT_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_truth(path: str | Path) -> pd.DataFrame:
    """Truth table ``location,feature,gd,true_count``."""
    return _read_table(path, TRUTH_COLUMNS, ["location", "feature", "gd"])


def read_estimates(path: str | Path) -> pd.DataFrame:
    """Estimate table ``gd,location,feature,estimate``."""
    return _read_table(path, ESTIMATE_COLUMNS, ["gd", "location", "feature"])


def read_values(path: str | Path) -> pd.DataFrame:
    """Either table as ``location,feature,gd,value``, chosen by the header."""
    header = [str(c).strip() for c in _read_csv(path, nrows=0).columns]
    if header == TRUTH_COLUMNS:
        return read_truth(path).rename(columns={"true_count": "value"})
    if header == ESTIMATE_COLUMNS:
        return read_estimates(path)[[*KEY, "estimate"]].rename(columns={"estimate": "value"})
    raise IngestionError(
        f"{path}: header must be {','.join(TRUTH_COLUMNS)} or {','.join(ESTIMATE_COLUMNS)}", line=1
    )


def write_frame(frame: pd.DataFrame, path: str | Path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def estimates_frame(Z_hat: NDArray[np.float64], gds: Sequence[int], epoch: int = 1) -> pd.DataFrame:
    """Long-format estimates for ``gds`` from an (I, J, S) array whose slab 0 is ``epoch``."""
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    gds = np.asarray(gds, dtype=np.int64)
    I, J, _ = Z_hat.shape
    gg, ii, jj = np.meshgrid(gds, np.arange(I), np.arange(J), indexing="ij")
    return pd.DataFrame(
        {
            "gd": gg.reshape(-1),
            "location": ii.reshape(-1),
            "feature": jj.reshape(-1),
            "estimate": Z_hat[ii, jj, gg - epoch].reshape(-1),
        },
        columns=ESTIMATE_COLUMNS,
    )


def read_graph(path: str | Path, n: int) -> LocationGraph:
    """Edge list ``u,v,weight``; every edge is mirrored."""
    frame = _read_table(path, GRAPH_COLUMNS, ["u", "v"])
    try:
        return LocationGraph.from_edges(n, frame.itertuples(index=False, name=None))
    except ArgumentError as exc:
        raise ArgumentError(f"{path}: {exc}") from exc


def write_graph(graph: LocationGraph, path: str | Path) -> None:
    frame = pd.DataFrame(graph.edges(), columns=GRAPH_COLUMNS)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_diagnostics(diag: Diagnostics, path: str | Path) -> None:
    """Diagnostics CSV ``iter,objective,residual,seconds``."""
    diag.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_json(payload: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_model(path: str | Path, factors: FactorSet, metadata: dict[str, Any] | None = None) -> None:
    """Store factors (and JSON metadata) in an ``.npz`` archive."""
    np.savez(
        path,
        A=factors.A,
        B=factors.B,
        C=factors.C,
        D=factors.D,
        metadata=np.array(json.dumps(metadata or {}, sort_keys=True)),
    )


def load_model(path: str | Path) -> tuple[FactorSet, dict[str, Any]]:
    with np.load(path, allow_pickle=False) as archive:
        missing = [name for name in "ABCD" if name not in archive.files]
        if missing:
            raise ArgumentError(f"{path}: model archive lacks factors {missing}")
        factors = FactorSet(archive["A"], archive["B"], archive["C"], archive["D"])
        metadata = json.loads(str(archive["metadata"])) if "metadata" in archive.files else {}
    return factors, metadata
