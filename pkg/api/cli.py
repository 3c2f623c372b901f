"""Command line: synth, fit, track, score, export-factors and bench.

Every flag may also come from a run-config file (``--config FILE``, lines of
``key = value`` using the flag's underscore name); flags given on the command
line win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from pydantic import ValidationError

from config import get_logger, settings, setup_logging
from config.run_config import dump_run_config, load_run_config
from core import evaluation, io
from core.errors import ArgumentError, MVTCError
from core.mtc_batch import fit as fit_batch
from core.multiversion import ingest
from core.schemas import ExperimentSpec, GeneratorConfig, SolverConfig
from core.synth import generate

logger = get_logger(__name__)

SOLVER_KEYS = tuple(SolverConfig.model_fields)
GENERATOR_KEYS = tuple(GeneratorConfig.model_fields)
# Experiment keys fit and track accept from a config file even without a flag.
EXPERIMENT_KEYS = (set(ExperimentSpec.model_fields) - {"solver"}) | set(SOLVER_KEYS)


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("none", "") else int(text)


# Parser


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run-config file of key = value lines")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--log-level", default=None, help=f"log level (default {settings.log_level})")


def _data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--events", dest="events_path", type=Path, help="event CSV location,feature,gd,ld,count")
    parser.add_argument("--truth", dest="truth_path", type=Path, help="truth CSV location,feature,gd,true_count")
    parser.add_argument("--graph", dest="graph_path", type=Path, help="location graph CSV u,v,weight")
    parser.add_argument("--K", dest="K", type=int, help="maximum number of updates per GD")
    parser.add_argument("--n-locations", type=int, help="number of locations (default: inferred)")
    parser.add_argument("--n-features", type=int, help="number of features (default: inferred)")
    parser.add_argument("--epoch", type=int, help="first generation date (default 1)")
    parser.add_argument("--horizon", type=_optional_int, help="last loading date (default: the log's)")
    parser.add_argument("--out-dir", dest="output_dir", type=Path, help="experiment directory")


def _solver_args(parser: argparse.ArgumentParser, online: bool = False) -> None:
    group = parser.add_argument_group("solver")
    group.add_argument("--rank", type=int, help=f"CP rank F (default {settings.default_rank})")
    group.add_argument("--alpha", type=float, help=f"weight of fully observed slabs (default {settings.default_alpha})")
    group.add_argument("--rho-a", type=float, help="graph regularization weight")
    group.add_argument("--rho", type=float, help="temporal smoothness weight")
    group.add_argument("--smooth-boundary", choices=["free", "fixed"], help="boundary rows of the smoothness operator")
    group.add_argument("--max-outer-iters", type=int)
    group.add_argument("--tol-rel-obj", type=float)
    group.add_argument("--tol-station", type=float)
    group.add_argument("--momentum", choices=["fista", "none"])
    group.add_argument("--restart-tol", type=float)
    group.add_argument("--init-iters", type=int)
    group.add_argument("--nnls-iters", type=int)
    group.add_argument("--nnls-tol", type=float)
    group.add_argument("--eig-tol", type=float)
    group.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    group.add_argument("--literal-update", action=argparse.BooleanOptionalAction, default=None)
    if online:
        group.add_argument("--fp-iters", type=int)
        group.add_argument("--fp-tol", type=float)
        group.add_argument("--literal-fp", action=argparse.BooleanOptionalAction, default=None)
        group.add_argument("--resync-every", type=_optional_int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvtc", description="Multi-version tensor completion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic event log with its truth")
    _common(p)
    for dim, help_ in (("I", "locations"), ("J", "features"), ("S", "generation dates"), ("K", "updates"), ("F", "rank")):
        p.add_argument(f"--{dim}", dest=dim, type=int, help=help_)
    p.add_argument("--fractions", type=_float_list, help="delay profile p_1..p_K")
    p.add_argument("--concentration", type=_float_list, help="Dirichlet concentration per update")
    p.add_argument("--noise-scale", type=float, help="log-normal jitter of the per-entry profile")
    p.add_argument("--factor-smoothness", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mismatch-scale", type=float, help="off-model perturbation of the totals")
    p.add_argument("--communities", type=int, help="planted location communities")
    p.add_argument("--community-spread", type=float)
    p.add_argument("--epoch", type=int)
    p.add_argument("--horizon", type=_optional_int, help="last loading date (default: last GD)")
    p.add_argument("--withheld-only", action=argparse.BooleanOptionalAction, default=False,
                   help="truth for the under-reported GDs only")
    p.add_argument("--out-dir", dest="output_dir", type=Path, help="directory for the generated files")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fit", help="batch solve; with --truth, the static evaluation")
    _common(p)
    _data_args(p)
    _solver_args(p)
    p.add_argument("--score-all-gds", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("track", help="dynamic replay with the online tracker")
    _common(p)
    _data_args(p)
    _solver_args(p, online=True)
    p.add_argument("--replay-start", type=int, help="horizon of the initial batch fit")
    p.add_argument("--restart-batch", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--first-appearance-only", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("score", help="RMSE, MAE and R^2 of an estimate table against a truth table")
    _common(p)
    p.add_argument("--estimates", dest="estimates_path", type=Path)
    p.add_argument("--truth", dest="truth_path", type=Path)
    p.add_argument("--gds", type=_int_list, help="only score these GDs")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("export-factors", help="factor matrices and metadata as JSON")
    _common(p)
    p.add_argument("--model", dest="model_path", type=Path, help="model.npz written by fit")
    p.add_argument("--planted", dest="planted_path", type=Path, help="planted.npz written by synth")
    p.add_argument("--out", dest="out_path", type=Path, help="JSON file (default: stdout)")
    p.set_defaults(handler=cmd_export_factors)

    p = sub.add_parser("bench", help="per-iteration time while sweeping one dimension")
    _common(p)
    p.add_argument("--dim", choices=evaluation.BENCH_DIMS)
    p.add_argument("--values", type=_int_list, help="comma-separated sizes")
    for dim, default in (("I", 64), ("J", 16), ("K", 4), ("S", 64), ("F", 8)):
        p.add_argument(f"--{dim}", dest=dim, type=int, default=default)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out", dest="out_path", type=Path, help="CSV file (default: stdout)")
    p.set_defaults(handler=cmd_bench)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ArgumentError(f"unknown command {command}")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults of the subcommand."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = load_run_config(args.config)
    sub = _subparser(parser, args.command)
    known = {action.dest for action in sub._actions}
    if args.command in ("fit", "track"):
        known |= EXPERIMENT_KEYS
    unknown = sorted(set(values) - known)
    if unknown:
        raise ArgumentError(f"{args.config}: unknown keys for {args.command}: {', '.join(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# Helpers


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [name for name in names if getattr(args, name, None) is None]
    if missing:
        raise ArgumentError(f"{args.command}: missing {', '.join(missing)}")


def _as_list(value: Any) -> Optional[list]:
    if value is None or isinstance(value, list):
        return value
    return [value]


def _picked(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    return {key: getattr(args, key) for key in keys if getattr(args, key, None) is not None}


def solver_config(args: argparse.Namespace) -> SolverConfig:
    return SolverConfig(**_picked(args, SOLVER_KEYS))


def experiment_spec(args: argparse.Namespace, mode: str) -> ExperimentSpec:
    fields = set(ExperimentSpec.model_fields) - {"solver", "mode"}
    return ExperimentSpec(mode=mode, solver=solver_config(args), **_picked(args, sorted(fields)))


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _model_metadata(result, ds) -> dict[str, Any]:  # type: ignore[no-untyped-def]
    return {
        "config": result.config.model_dump(mode="json"),
        "dims": list(ds.update_tensor.dims),
        "epoch": ds.epoch,
        "horizon": ds.horizon,
        "objective_trace": result.diagnostics.objective_trace,
        "stop_reason": result.diagnostics.stop_reason,
    }


# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    _require(args, "I", "J", "S", "K", "F", "output_dir")
    values = _picked(args, GENERATOR_KEYS)
    for key in ("fractions", "concentration"):
        if key in values:
            values[key] = _as_list(values[key])
    cfg = GeneratorConfig(**values)
    data = generate(cfg, args.horizon, all_gds=not args.withheld_only)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_events(data.events, out / "events.csv")
    io.write_frame(data.withheld, out / "truth.csv")
    io.save_model(out / "planted.npz", data.truth.factors, {"generator": cfg.model_dump(mode="json")})
    if data.truth.graph is not None:
        io.write_graph(data.truth.graph, out / "graph.csv")
    dump_run_config({**cfg.model_dump(mode="json"), "horizon": data.horizon}, out / "config.txt")
    logger.info("synth_written", output_dir=str(out), events=len(data.events), horizon=data.horizon)
    _emit({"output_dir": str(out), "events": len(data.events), "horizon": data.horizon, "truth_rows": len(data.withheld)})
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    _require(args, "events_path", "K", "output_dir")
    if args.truth_path is not None:
        spec = experiment_spec(args, "static")
        outcome = evaluation.run_static(spec)
        res = outcome.fits["mtc"]
        io.save_model(Path(spec.output_dir) / "model.npz", res.factors, _model_metadata(res, outcome.dataset))
        _emit({name: report.model_dump() for name, report in outcome.reports.items()})
        return 0

    # No truth: solve and write estimates only.
    cfg = solver_config(args)
    events = io.read_events(args.events_path)
    if not len(events):
        raise ArgumentError(f"{args.events_path}: no events")
    ds = ingest(
        events,
        args.K,
        args.horizon or int(events.ld.max()),
        n_locations=args.n_locations,
        n_features=args.n_features,
        epoch=args.epoch if args.epoch is not None else 1,
    )
    graph = io.read_graph(args.graph_path, ds.n_locations) if args.graph_path else None
    res = fit_batch(ds, graph, cfg)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_frame(io.estimates_frame(res.hybrid, ds.gds, ds.epoch), out / "estimates_mtc.csv")
    io.write_diagnostics(res.diagnostics, out / "diagnostics_mtc.csv")
    io.save_model(out / "model.npz", res.factors, _model_metadata(res, ds))
    resolved = {
        **_picked(args, ("events_path", "graph_path", "K", "n_locations", "n_features")),
        "epoch": ds.epoch,
        "horizon": ds.horizon,
        "output_dir": out,
        **cfg.model_dump(mode="json"),
    }
    dump_run_config(resolved, out / "config.txt")
    diag = res.diagnostics
    _emit({"iterations": diag.iterations, "stop_reason": diag.stop_reason, "objective": diag.objective_trace[-1]})
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    _require(args, "events_path", "truth_path", "K", "replay_start", "output_dir")
    outcome = evaluation.run_dynamic(experiment_spec(args, "dynamic"))
    _emit({method: agg.model_dump() for method, agg in outcome.summary.items()})
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    _require(args, "estimates_path", "truth_path")
    estimates = io.read_values(args.estimates_path).rename(columns={"value": "estimate"})
    truth = io.read_values(args.truth_path).rename(columns={"value": "true_count"})
    scope = "all"
    if args.gds:
        truth = truth[truth["gd"].isin(args.gds)]
        scope = "gds " + ",".join(str(g) for g in args.gds)
    _emit(evaluation.score_frames(estimates, truth, scope).model_dump())
    return 0


def cmd_export_factors(args: argparse.Namespace) -> int:
    _require(args, "model_path")
    factors, metadata = io.load_model(args.model_path)
    planted = io.load_model(args.planted_path)[0] if args.planted_path else None
    config = SolverConfig(**metadata["config"]) if "config" in metadata else None
    payload = evaluation.export_factors(
        factors, config=config, objective_trace=metadata.get("objective_trace", ()), planted=planted
    )
    if args.out_path is None:
        _emit(payload)
    else:
        io.write_json(payload, args.out_path)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    _require(args, "dim", "values")
    frame = evaluation.bench(
        args.dim,
        _as_list(args.values),
        I=args.I,
        J=args.J,
        K=args.K,
        S=args.S,
        F=args.F,
        iters=args.iters,
        seed=args.seed or 0,
    )
    if args.out_path is None:
        frame.to_csv(sys.stdout, index=False)
    else:
        io.write_frame(frame, args.out_path)
    return 0


def _one_line(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        return "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
    return " ".join(str(exc).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    try:
        args = parse_args(argv)
        setup_logging(args.log_level, stream=sys.stderr)
        handler: Callable[[argparse.Namespace], int] = args.handler
        return handler(args)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    except (MVTCError, ValidationError, OSError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
