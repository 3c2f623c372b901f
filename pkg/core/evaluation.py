"""Metrics, the static and dynamic evaluation protocols, benchmarks and factor export."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from config import get_logger
from config.run_config import dump_run_config
from core import io, mtc_online
from core.errors import ArgumentError
from core.mtc_batch import FitResult, MTCSolver, fit, momentum_step
from core.multiversion import MultiVersionDataset, ingest, naive_estimate
from core.regularization import LocationGraph
from core.schemas import AggregateReport, ExperimentSpec, GeneratorConfig, MetricSummary, ScoreReport, SolverConfig
from core.synth import generate
from core.tensor_core import FactorSet

logger = get_logger(__name__)

BENCH_DIMS = ("I", "J", "K", "S", "F")
SCORE_COLUMNS = ["rmse", "mae", "r2", "n", "scope"]


# Metrics


def score(estimates: Any, truth: Any, scope: str = "underreported") -> ScoreReport:
    """RMSE, MAE and R^2 of aligned estimate and truth arrays.

    R^2 uses the sum of squares about the truth mean and is None when the truth
    is constant.
    """
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    tru = np.asarray(truth, dtype=np.float64).reshape(-1)
    if est.shape != tru.shape:
        raise ArgumentError(f"{est.size} estimates cannot be scored against {tru.size} truth values")
    if est.size == 0:
        raise ArgumentError("nothing to score: the scope is empty")
    if not (np.isfinite(est).all() and np.isfinite(tru).all()):
        raise ArgumentError("estimates and truth must be finite")
    err = est - tru
    sse = float(np.sum(err * err))
    sst = float(np.sum((tru - tru.mean()) ** 2))
    return ScoreReport(
        rmse=float(np.sqrt(sse / est.size)),
        mae=float(np.mean(np.abs(err))),
        r2=None if sst == 0.0 else min(1.0 - sse / sst, 1.0),
        n=int(est.size),
        scope=scope,
    )


def relative_rmse(estimates: Any, truth: Any) -> float:
    """RMSE divided by the root mean square of the truth."""
    tru = np.asarray(truth, dtype=np.float64)
    rms = float(np.sqrt(np.mean(tru * tru)))
    if rms == 0.0:
        raise ArgumentError("relative error is undefined for an all-zero truth")
    return score(estimates, tru).rmse / rms


def score_frames(estimates: pd.DataFrame, truth: pd.DataFrame, scope: str = "underreported") -> ScoreReport:
    """Score long-format tables joined on (location, feature, gd); row order is irrelevant."""
    try:
        merged = truth.merge(estimates, on=io.KEY, how="left", validate="one_to_one")
    except pd.errors.MergeError as exc:
        raise ArgumentError(f"duplicate (location, feature, gd) keys: {exc}") from exc
    missing = merged["estimate"].isna()
    if missing.any():
        row = merged.loc[missing, io.KEY].iloc[0].to_dict()
        raise ArgumentError(f"{int(missing.sum())} truth entries have no estimate, e.g. {row}")
    merged = merged.sort_values(io.KEY, kind="stable")
    return score(merged["estimate"].to_numpy(), merged["true_count"].to_numpy(), scope)


def summarize(reports: Iterable[ScoreReport]) -> AggregateReport:
    """Mean and (population) standard deviation of each metric."""
    reports = list(reports)
    if not reports:
        raise ArgumentError("no scores to summarize")

    def stats(values: Sequence[float]) -> MetricSummary:
        arr = np.asarray(values, dtype=np.float64)
        return MetricSummary(mean=float(arr.mean()), std=float(arr.std()))

    r2 = [r.r2 for r in reports if r.r2 is not None]
    return AggregateReport(
        rmse=stats([r.rmse for r in reports]),
        mae=stats([r.mae for r in reports]),
        r2=stats(r2) if r2 else None,
        n_scores=len(reports),
    )


# Factor export


def column_norms(factors: FactorSet) -> dict[str, list[float]]:
    return {name: np.linalg.norm(M, axis=0).tolist() for name, M in zip("ABCD", factors.as_list())}


def match_columns(estimated: FactorSet, planted: FactorSet) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching of components by congruence.

    Congruence of a pair is the product over modes of |cosine| between the
    columns, so it ignores scaling and sign. Returns (estimated, planted,
    congruence) triples in decreasing congruence.
    """
    if estimated.dims[:3] != planted.dims[:3]:
        raise ArgumentError(f"factor dims differ: {estimated.dims} vs {planted.dims}")
    congruence = np.ones((estimated.rank, planted.rank))
    for M, P in zip(estimated.as_list(), planted.as_list()):
        if M.shape[0] != P.shape[0]:
            continue
        m_norm = np.linalg.norm(M, axis=0)
        p_norm = np.linalg.norm(P, axis=0)
        denom = np.outer(m_norm, p_norm)
        cos = np.divide(M.T @ P, denom, out=np.zeros_like(denom), where=denom > 0)
        congruence *= np.abs(cos)

    pairs = []
    work = congruence.copy()
    for _ in range(min(work.shape)):
        r, c = np.unravel_index(int(np.argmax(work)), work.shape)
        pairs.append((int(r), int(c), float(congruence[r, c])))
        work[r, :] = -1.0
        work[:, c] = -1.0
    return pairs


def export_factors(
    factors: FactorSet,
    *,
    config: Optional[SolverConfig] = None,
    objective_trace: Sequence[float] = (),
    planted: Optional[FactorSet] = None,
) -> dict[str, Any]:
    """JSON-ready description of a factor set."""
    payload: dict[str, Any] = {
        "dims": list(factors.dims),
        "rank": factors.rank,
        "factors": {name: M.tolist() for name, M in zip("ABCD", factors.as_list())},
        "column_norms": column_norms(factors),
        "config": config.model_dump() if config is not None else {},
        "seed": config.seed if config is not None else None,
        "objective_trace": [float(v) for v in objective_trace],
    }
    if planted is not None:
        payload["matching"] = [
            {"estimated": a, "planted": b, "congruence": c} for a, b, c in match_columns(factors, planted)
        ]
    return payload


# Experiment plumbing


def flat_config(spec: ExperimentSpec) -> dict[str, Any]:
    """Experiment and solver settings as one flat mapping (the run-config keys)."""
    values = spec.model_dump(mode="json", exclude={"solver"})
    values.update(spec.solver.model_dump(mode="json"))
    return values


def load_dataset(spec: ExperimentSpec, horizon: int | None = None) -> tuple[MultiVersionDataset, Optional[LocationGraph]]:
    events = io.read_events(spec.events_path)
    if not len(events):
        raise ArgumentError(f"{spec.events_path}: no events")
    horizon = horizon or spec.horizon or int(events.ld.max())
    ds = ingest(
        events,
        spec.K,
        horizon,
        n_locations=spec.n_locations,
        n_features=spec.n_features,
        epoch=spec.epoch,
    )
    graph = io.read_graph(spec.graph_path, ds.n_locations) if spec.graph_path else None
    return ds, graph


def _prepare_output(spec: ExperimentSpec) -> Path:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(flat_config(spec), out / "config.txt")
    (out / "config.json").write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return out


@dataclass
class StaticOutcome:
    reports: dict[str, ScoreReport]
    fits: dict[str, FitResult]
    dataset: MultiVersionDataset


def run_static(spec: ExperimentSpec, *, write: bool = True) -> StaticOutcome:
    """Naive, MTC and unregularized MTC on one dataset, scored on the withheld GDs."""
    if spec.truth_path is None:
        raise ArgumentError("static evaluation needs a truth file")
    ds, graph = load_dataset(spec)
    truth = io.read_truth(spec.truth_path)
    gds = ds.gds if spec.score_all_gds else ds.underreported_gds
    scope = "all" if spec.score_all_gds else "underreported"
    truth = truth[truth["gd"].isin(gds)]
    if truth.empty:
        raise ArgumentError(f"truth has no rows for GDs {gds.tolist()}")
    logger.info("static_run_started", dims=ds.update_tensor.dims, scored_gds=gds.tolist())

    fits = {
        "mtc": fit(ds, graph, spec.solver),
        "mtc_unregularized": fit(ds, graph, spec.solver.unregularized()),
    }
    estimates = {"naive": naive_estimate(ds), **{name: res.hybrid for name, res in fits.items()}}
    frames = {name: io.estimates_frame(Z, ds.gds, ds.epoch) for name, Z in estimates.items()}
    reports = {name: score_frames(frame, truth, scope) for name, frame in frames.items()}
    for name, report in reports.items():
        logger.info("method_scored", method=name, rmse=report.rmse, mae=report.mae, r2=report.r2)

    if write:
        out = _prepare_output(spec)
        for name, frame in frames.items():
            io.write_frame(frame, out / f"estimates_{name}.csv")
        for name, res in fits.items():
            io.write_diagnostics(res.diagnostics, out / f"diagnostics_{name}.csv")
            payload = export_factors(
                res.factors, config=res.config, objective_trace=res.diagnostics.objective_trace
            )
            io.write_json(payload, out / f"factors_{name}.json")
        rows = [{"method": name, **report.model_dump()} for name, report in reports.items()]
        io.write_frame(pd.DataFrame(rows, columns=["method", *SCORE_COLUMNS]), out / "scores.csv")
    return StaticOutcome(reports=reports, fits=fits, dataset=ds)


@dataclass
class DynamicOutcome:
    scores: pd.DataFrame
    summary: dict[str, AggregateReport]
    timing: pd.DataFrame
    arrivals: list[mtc_online.Arrival]


def _truth_cube(truth: pd.DataFrame, ds_shape: tuple[int, int], epoch: int, last_gd: int) -> np.ndarray:
    I, J = ds_shape
    cube = np.full((I, J, last_gd - epoch + 1), np.nan)
    rows = truth[(truth["gd"] >= epoch) & (truth["gd"] <= last_gd)]
    if ((rows["location"] >= I) | (rows["feature"] >= J)).any():
        raise ArgumentError("truth refers to locations or features outside the data")
    loc, feat, gd = (rows[c].to_numpy() for c in ("location", "feature", "gd"))
    cube[loc, feat, gd - epoch] = rows["true_count"].to_numpy()
    return cube


def _score_window(
    ld: int,
    window: NDArray[np.int64],
    estimate: np.ndarray,
    cube: np.ndarray,
    epoch: int,
    first_only: bool,
) -> list[tuple[int, ScoreReport]]:
    scored = []
    for w, gd in enumerate(window):
        if first_only and gd != ld:
            continue
        truth = cube[..., gd - epoch]
        if np.isnan(truth).any():
            logger.debug("gd_without_truth", gd=int(gd))
            continue
        scored.append((int(gd), score(estimate[..., w], truth, scope=f"age {ld - gd}")))
    return scored


def run_dynamic(spec: ExperimentSpec, *, write: bool = True) -> DynamicOutcome:
    """Batch fit at ``replay_start``, then replay every later loading date.

    Each GD is scored at every arrival while it is under-reported (only at
    its first appearance with ``first_appearance_only``).
    """
    if spec.replay_start is None:
        raise ArgumentError("dynamic evaluation needs replay_start")
    if spec.truth_path is None:
        raise ArgumentError("dynamic evaluation needs a truth file")
    events = io.read_events(spec.events_path)
    if not len(events):
        raise ArgumentError(f"{spec.events_path}: no events")
    horizon = spec.horizon or int(events.ld.max())
    if not spec.epoch + spec.K - 1 <= spec.replay_start < horizon:
        raise ArgumentError(
            f"replay_start must lie in [{spec.epoch + spec.K - 1}, {horizon}), got {spec.replay_start}"
        )
    ds0 = ingest(
        events,
        spec.K,
        spec.replay_start,
        n_locations=spec.n_locations,
        n_features=spec.n_features,
        epoch=spec.epoch,
    )
    graph = io.read_graph(spec.graph_path, ds0.n_locations) if spec.graph_path else None
    cube = _truth_cube(io.read_truth(spec.truth_path), (ds0.n_locations, ds0.n_features), spec.epoch, horizon)
    logger.info("dynamic_run_started", start=spec.replay_start, horizon=horizon, restart_batch=spec.restart_batch)

    state = mtc_online.start(fit(ds0, graph, spec.solver), ds0, graph, spec.solver)
    later = events.select((events.ld > spec.replay_start) & (events.ld <= horizon)).sorted_by_ld()

    collected: dict[str, list[ScoreReport]] = {}
    score_rows: list[dict[str, Any]] = []
    timing_rows: list[dict[str, Any]] = []
    arrivals: list[mtc_online.Arrival] = []

    def record(method: str, ld: int, window: NDArray[np.int64], estimate: np.ndarray) -> None:
        for gd, report in _score_window(ld, window, estimate, cube, spec.epoch, spec.first_appearance_only):
            collected.setdefault(method, []).append(report)
            score_rows.append({"method": method, "ld": ld, "gd": gd, **report.model_dump()})

    for n, (state, arrival) in enumerate(mtc_online.stream(state, later, until=horizon), start=1):
        arrivals.append(arrival)
        record("mtc_online", arrival.ld, arrival.window_gds, arrival.estimate)
        timing_rows.append(
            {
                "arrival": n,
                "ld": arrival.ld,
                "method": "mtc_online",
                "seconds": arrival.seconds,
                "fp_iters_used": arrival.fp_iters_used,
                "residual": arrival.residual,
            }
        )
        if spec.restart_batch:
            tick = time.perf_counter()
            res = fit(state.dataset, graph, spec.solver)
            seconds = time.perf_counter() - tick
            record("mtc_batch", arrival.ld, arrival.window_gds, res.estimate[..., state.dataset.n_full_slabs :])
            residuals = res.diagnostics.residual_trace
            timing_rows.append(
                {
                    "arrival": n,
                    "ld": arrival.ld,
                    "method": "mtc_batch",
                    "seconds": seconds,
                    "fp_iters_used": 0,
                    "residual": residuals[-1] if residuals else np.nan,
                }
            )

    if not collected:
        raise ArgumentError("no arrival had truth for its under-reported GDs")
    scores = pd.DataFrame(score_rows, columns=["method", "ld", "gd", *SCORE_COLUMNS])
    timing = pd.DataFrame(timing_rows, columns=["arrival", "ld", "method", "seconds", "fp_iters_used", "residual"])
    summary = {method: summarize(collected[method]) for method in sorted(collected)}
    for method, agg in summary.items():
        logger.info("dynamic_method_summary", method=method, rmse=agg.rmse.mean, rmse_std=agg.rmse.std)

    if write:
        out = _prepare_output(spec)
        io.write_frame(scores, out / "scores.csv")
        rows = []
        for method, agg in summary.items():
            for metric in ("rmse", "mae", "r2"):
                value = getattr(agg, metric)
                if value is not None:
                    rows.append({"method": method, "metric": metric, "mean": value.mean, "std": value.std})
        io.write_frame(pd.DataFrame(rows, columns=["method", "metric", "mean", "std"]), out / "summary.csv")
        io.write_frame(timing, out / "timing.csv")
        online = timing[timing["method"] == "mtc_online"]
        io.write_frame(online[["arrival", "seconds", "fp_iters_used", "residual"]], out / "arrivals.csv")
        estimates_dir = out / "estimates"
        estimates_dir.mkdir(exist_ok=True)
        for arrival in arrivals:
            frame = io.estimates_frame(arrival.estimate, arrival.window_gds, int(arrival.window_gds[0]))
            io.write_frame(frame, estimates_dir / f"online_ld{arrival.ld}.csv")
    return DynamicOutcome(scores=scores, summary=summary, timing=timing, arrivals=arrivals)


# Benchmark


def bench(
    dim: str,
    values: Sequence[int],
    *,
    I: int = 64,  # noqa: E741
    J: int = 16,
    K: int = 4,
    S: int = 64,
    F: int = 8,
    iters: int = 10,
    seed: int = 0,
) -> pd.DataFrame:
    """Median wall time of one outer iteration while sweeping one dimension."""
    if dim not in BENCH_DIMS:
        raise ArgumentError(f"dimension must be one of {BENCH_DIMS}, got {dim!r}")
    if iters < 1:
        raise ArgumentError("iters must be positive")
    rows = []
    for value in values:
        dims = {"I": I, "J": J, "K": K, "S": S, "F": F, dim: int(value)}
        data = generate(GeneratorConfig(**dims, seed=seed))
        ds = ingest(data.events, dims["K"], data.horizon, n_locations=dims["I"], n_features=dims["J"])
        cfg = SolverConfig(rank=dims["F"], init_iters=1, seed=seed)
        solver = MTCSolver(ds, None, cfg)
        state = solver.new_state(solver.init_factors().as_list())
        solver.outer_iteration(state)  # warm-up, untimed
        times = []
        for it in range(1, iters + 1):
            tick = time.perf_counter()
            state.iteration = it
            e_next, state.nu = momentum_step(state.e)
            solver.outer_iteration(state)
            state.e = e_next
            times.append(time.perf_counter() - tick)
        seconds = float(np.median(times))
        rows.append({"dim": dim, "value": int(value), "seconds_per_iter": seconds})
        logger.info("bench_point", dim=dim, value=int(value), seconds_per_iter=seconds)
    return pd.DataFrame(rows, columns=["dim", "value", "seconds_per_iter"])
