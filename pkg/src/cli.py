import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from config import (
    ABLATIONS,
    BOTTLENECK_STRENGTH,
    BRUTE_FORCE_MAX_NODES,
    CURVATURE_THRESHOLD,
    DATA_DIR,
    DEFAULT_SEED,
    DEFAULT_SPLIT,
    EWMA_DECAY,
    RANDOM_BISECTIONS,
    SENSITIVITY,
)
from covariance import CovarianceError
from dataio import (
    DataError,
    SnapshotSequence,
    StaticSnapshots,
    SynthConfig,
    chronological_split,
    load_csv,
    named_rng,
    save_csv,
    save_ground_truth,
    synth_generate,
)
from forecaster import TrainConfig, TrainingError, fit, load_checkpoint, save_checkpoint
from graph import (
    GraphError,
    WeightedGraph,
    cheeger_brute,
    diagnostics,
    load_graph_csv,
    random_bisections,
    rewire,
    save_graph_csv,
)
from metrics import MetricsError, evaluate
from reporting import curvature_table, diagnostics_table, eval_table
from sampler import ForecastEnsemble, SamplingError, rollout

# Errors reported as a failed stage with exit status 1
STAGE_ERRORS = (
    GraphError,
    CovarianceError,
    DataError,
    MetricsError,
    SamplingError,
    TrainingError,
    ValueError,
    KeyError,
    OSError,
)

DATASET_FILE = "dataset.csv"
GRAPH_FILE = "graph.csv"
GROUND_TRUTH_FILE = "ground_truth.json"
CHECKPOINT_FILE = "checkpoint.json"
LOSS_TRACE_FILE = "loss_trace.csv"
ENSEMBLE_CSV = "ensemble.csv"
ENSEMBLE_NPZ = "ensemble.npz"
EVAL_FILE = "eval_report.json"
REWIRE_FILE = "rewire_report.json"


def _echo_config(command: str, args: argparse.Namespace) -> None:
    """Prints the fully resolved configuration of a run for reproducibility."""
    resolved = {key: value for key, value in vars(args).items() if key != "handler"}
    print(f"# {command} configuration")
    print(json.dumps(resolved, indent=2, default=str))


def _snapshots(graph: WeightedGraph, seed: int, static: bool):
    if static:
        return StaticSnapshots(graph)
    return SnapshotSequence(graph, seed=int(named_rng(seed, "graph").integers(2**31)))


def _train_config(args: argparse.Namespace) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "rank": args.rank,
        "horizon": args.window,
        "mixtures": args.mixtures,
        "lag": args.lag,
        "hidden": args.hidden,
        "max_epochs": args.epochs,
        "max_steps": args.max_steps,
        "learning_rate": args.lr,
        "batch_windows": args.batch,
        "ablate": args.ablate,
    }
    return TrainConfig(**{key: value for key, value in overrides.items() if value is not None})


def cmd_gen(args: argparse.Namespace) -> int:
    """Writes a synthetic dataset, its graph and the ground-truth covariance."""
    _echo_config("gen", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = SynthConfig(N=args.nodes, T=args.steps, seed=args.seed, phi=args.phi, a=args.a, b=args.b)
    dataset, truth, graph = synth_generate(config)
    save_csv(dataset, out / DATASET_FILE)
    save_graph_csv(graph, out / GRAPH_FILE)
    save_ground_truth(truth, out / GROUND_TRUTH_FILE)

    print(f"Wrote {dataset.T} x {dataset.N} dataset, {len(graph.edges())} edges to {out}")
    return 0


def cmd_rewire_report(args: argparse.Namespace) -> int:
    """Graph measures before and after curvature-aware reweighting."""
    _echo_config("rewire-report", args)
    graph = load_graph_csv(Path(args.graph), n=args.nodes)
    rewired, curvature = rewire(graph, args.kappa0, args.tau, args.lam)

    if graph.n <= BRUTE_FORCE_MAX_NODES:
        _, subset = cheeger_brute(graph)
        cuts = {"cheeger": subset}
    else:
        cuts = {
            f"bisection-{index}": subset
            for index, subset in enumerate(random_bisections(graph.n, RANDOM_BISECTIONS, args.seed))
        }
    report = diagnostics(graph, rewired, cuts)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / REWIRE_FILE, "w") as f:
        json.dump({"diagnostics": report.to_dict(), "curvature": curvature.to_dict()}, f, indent=2)

    print(diagnostics_table(report))
    print()
    print(curvature_table(curvature))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Fits the model and writes the checkpoint and the loss trace."""
    _echo_config("train", args)
    dataset = load_csv(Path(args.data))
    graph = load_graph_csv(Path(args.graph), n=dataset.N)
    config = _train_config(args)

    params, trace = fit(dataset, _snapshots(graph, config.seed, args.static_graph), config)

    checkpoint = Path(args.checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, config, checkpoint)
    trace.to_csv(checkpoint.parent / LOSS_TRACE_FILE, index=False, lineterminator="\n")

    print(f"Best validation NLL {trace['best_val_nll'].iloc[-1]:.4f} after {int(trace['step'].iloc[-1])} steps")
    print(f"Checkpoint written to {checkpoint}")
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    """Rolls out sample paths from the end of the train+validation history."""
    _echo_config("forecast", args)
    dataset = load_csv(Path(args.data))
    graph = load_graph_csv(Path(args.graph), n=dataset.N)
    params, config = load_checkpoint(Path(args.checkpoint))

    train, val, _ = chronological_split(dataset, config.split)
    history = dataset.values[: train.T + val.T]
    volatility = "no-volatility" not in (args.ablate, config.ablate)

    ensemble = rollout(
        params,
        history,
        _snapshots(graph, config.seed, args.static_graph),
        horizon=args.horizon,
        n_samples=args.samples,
        seed=args.seed,
        config=config,
        rho=args.rho,
        volatility=volatility,
        train_end=train.T,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ensemble.save_csv(out / ENSEMBLE_CSV)
    ensemble.save_npz(out / ENSEMBLE_NPZ)
    print(f"Wrote {ensemble.n_samples} paths x {ensemble.horizon} steps to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Scores an ensemble against the rows that follow its forecast origin."""
    _echo_config("eval", args)
    dataset = load_csv(Path(args.data))
    ensemble = ForecastEnsemble.load_npz(Path(args.ensemble))

    # An explicit --split wins; otherwise the origin stored with the ensemble
    if args.split:
        train, val, _ = chronological_split(dataset, tuple(args.split))
        start = train.T + val.T
    elif ensemble.origin > 0:
        start = ensemble.origin
    else:
        train, val, _ = chronological_split(dataset, DEFAULT_SPLIT)
        start = train.T + val.T

    available = dataset.T - start
    if ensemble.horizon > available:
        raise MetricsError(f"forecast horizon {ensemble.horizon} exceeds the {available} steps after origin {start}")
    report = evaluate(ensemble, dataset.values[start : start + ensemble.horizon])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / EVAL_FILE, "w") as f:
        f.write(report.to_json())

    print(eval_table(report))
    if not report.is_finite():
        logging.error("Evaluation produced non-finite metrics.")
        return 1
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    """gen -> train -> forecast -> eval in one output directory."""
    out = Path(args.out)
    model_paths = {"data": out / DATASET_FILE, "graph": out / GRAPH_FILE, "checkpoint": out / CHECKPOINT_FILE}
    steps = [
        ("gen", cmd_gen, {}),
        ("train", cmd_train, model_paths),
        ("forecast", cmd_forecast, model_paths),
        ("eval", cmd_eval, {"data": out / DATASET_FILE, "ensemble": out / ENSEMBLE_NPZ, "split": None}),
    ]
    for stage, handler, extra in steps:
        status = _run_stage(stage, handler, argparse.Namespace(**{**vars(args), **extra}))
        if status != 0:
            return status
    return 0


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rank", type=int, help="low-rank dimension R")
    parser.add_argument("--window", type=int, help="batch horizon D")
    parser.add_argument("--mixtures", type=int, help="temporal kernel components M")
    parser.add_argument("--lag", type=int, help="lag window P")
    parser.add_argument("--hidden", type=int, help="hidden dimension H")
    parser.add_argument("--epochs", type=int, help="maximum epochs")
    parser.add_argument("--max-steps", type=int, help="maximum gradient steps")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--batch", type=int, help="windows per gradient step")


def _add_gen_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nodes", type=int, default=SynthConfig.N)
    parser.add_argument("--steps", type=int, default=SynthConfig.T)
    parser.add_argument("--phi", type=float, default=SynthConfig.phi)
    parser.add_argument("--a", type=float, default=SynthConfig.a)
    parser.add_argument("--b", type=float, default=SynthConfig.b)


def _add_forecast_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--horizon", type=int, default=12, help="forecast steps Q")
    parser.add_argument("--samples", type=int, default=100, help="sample paths S")
    parser.add_argument("--rho", type=float, default=EWMA_DECAY, help="EWMA decay")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvecov", description="Curvature-aware probabilistic forecasting")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        command = sub.add_parser(name, help=help_text)
        command.set_defaults(handler=handler)
        command.add_argument("--seed", type=int, default=DEFAULT_SEED)
        command.add_argument("--out", default=str(DATA_DIR))
        return command

    gen = add("gen", cmd_gen, "generate synthetic data")
    _add_gen_flags(gen)

    report = add("rewire-report", cmd_rewire_report, "graph measures before/after reweighting")
    report.add_argument("--graph", required=True)
    report.add_argument("--nodes", type=int, help="node count (default: largest id + 1)")
    report.add_argument("--kappa0", type=float, default=CURVATURE_THRESHOLD)
    report.add_argument("--tau", type=float, default=SENSITIVITY)
    report.add_argument("--lam", type=float, default=BOTTLENECK_STRENGTH)

    train = add("train", cmd_train, "fit the model")
    train.add_argument("--data", required=True)
    train.add_argument("--graph", required=True)
    train.add_argument("--checkpoint", default=str(DATA_DIR / CHECKPOINT_FILE))
    train.add_argument("--ablate", choices=ABLATIONS, default="none")
    train.add_argument("--static-graph", action="store_true", help="disable per-step graph perturbation")
    _add_model_flags(train)

    forecast = add("forecast", cmd_forecast, "sample forecast paths")
    forecast.add_argument("--data", required=True)
    forecast.add_argument("--graph", required=True)
    forecast.add_argument("--checkpoint", required=True)
    forecast.add_argument("--ablate", choices=ABLATIONS, default="none")
    forecast.add_argument("--static-graph", action="store_true")
    _add_forecast_flags(forecast)

    evaluation = add("eval", cmd_eval, "score an ensemble")
    evaluation.add_argument("--data", required=True)
    evaluation.add_argument("--ensemble", required=True)
    evaluation.add_argument("--split", type=float, nargs=3, help="train/val/test fractions")

    pipeline = add("pipeline", cmd_pipeline, "gen, train, forecast and eval")
    pipeline.add_argument("--ablate", choices=ABLATIONS, default="none")
    pipeline.add_argument("--static-graph", action="store_true")
    _add_gen_flags(pipeline)
    _add_model_flags(pipeline)
    _add_forecast_flags(pipeline)

    return parser


def _run_stage(stage: str, handler, args: argparse.Namespace) -> int:
    try:
        return handler(args)
    except STAGE_ERRORS as e:
        logging.error(f"{stage} failed: {e}")
        return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    # Configure logging to display timestamp, level, and message
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    np.seterr(over="ignore", under="ignore")
    return _run_stage(args.command, args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
