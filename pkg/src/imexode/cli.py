"""
Command-line interface for imexode.

Every subcommand returns a process exit code: 0 on success, otherwise the
code carried by the raised ImexOdeError (2 config, 3 solver divergence,
4 blow-up, 5 I/O), so failed runs can be tabulated like successful ones.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from . import __version__
from .models.adjoint import gradient_check, kink_free_mlp
from .models.datagen import Dataset, generate_burgers, generate_ks, read_dataset, synthetic_dataset, write_dataset
from .models.fields import ConvectionField, stiff_test_problem
from .models.integrator import NewtonConfig, NfeCounter, check_linear_stability, convergence_study, rollout
from .models.linalg import DenseOperator, SolverConfig
from .models.netcore import PartitionedODE, init_weights, load_model, make_ks_stencil, save_model
from .models.tableaux import IMEX_SCHEMES, SchemeId, format_tableau, get_tableau, verify_order_conditions
from .models.training import TrainConfig, build_ode, steps_for, train
from .utils.config import RunConfig
from .utils.errors import ConfigError, ImexOdeError, UnstableStepError, exit_code_for
from .utils.logging import get_run_logger, setup_logger
from .utils.metrics import MetricsWriter, write_table_csv, write_trajectory_csv

DEFAULT_CONVERGENCE_SCHEMES = [s.value for s in IMEX_SCHEMES] + [SchemeId.EULER.value]
CONVERGENCE_PROBLEMS = {"stiff-quadratic": None, "stiff-quadratic-fast": 500.0}


# --- shared helpers ----------------------------------------------------------

def _run_config(args: argparse.Namespace, **overrides: Any) -> RunConfig:
    """Config file values with the command-line flags layered on top."""
    overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def _solver_config(run: RunConfig) -> SolverConfig:
    return SolverConfig(
        kind=run.solver_kind,
        krylov_tol=run.solver_tol,
        krylov_maxit=run.solver_maxit,
        restart=run.solver_restart,
    )


def _preset_for(run: RunConfig, dataset: Dataset) -> Dict[str, Any]:
    """Experiment preset checked against the dataset it will be used with."""
    preset = run.preset()
    if dataset.grid != preset["grid"]:
        raise ConfigError(
            f"Dataset grid {dataset.grid} does not match experiment '{run.experiment}' grid {preset['grid']}"
        )
    preset["length"] = dataset.length
    return preset


def _train_config(run: RunConfig, scheme: SchemeId, dt: float, steps: int) -> TrainConfig:
    try:
        return TrainConfig(
            scheme=scheme,
            dt=dt,
            steps_per_sample=steps,
            batch_size=run.batch_size,
            epochs=run.epochs,
            lr=run.lr,
            seed=run.seed,
            max_pairs=run.max_pairs,
            solver=_solver_config(run),
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid training settings: {e}") from e


def _require(value: Optional[str], what: str) -> str:
    if not value:
        raise ConfigError(f"No {what} given (use the flag or set it in the config file)")
    return value


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6e}"


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Generate a KS or Burgers dataset file."""
    run = _run_config(args, experiment=args.experiment, n_traj=args.n_traj, dataset=args.out)
    preset = run.preset()
    out = run.dataset or f"{run.experiment}.ds"

    if preset["kind"] == "ks":
        dataset = generate_ks(
            preset["grid"], preset["length"], seed=run.seed,
            transient=args.transient, span=args.span, sample_interval=preset["sample_interval"],
        )
    else:
        dataset = generate_burgers(
            preset["grid"], preset["length"], preset["nu"], n_traj=preset["n_traj"], seed=run.seed,
            n_train=preset["n_train"], t_final=args.t_final, sample_interval=preset["sample_interval"],
        )
    write_dataset(out, dataset)
    logger.info(f"Wrote {out}")

    table = Table(title=f"Dataset {out}")
    table.add_column("field")
    table.add_column("value", justify="right")
    table.add_row("d", str(dataset.grid))
    table.add_row("n_traj", str(dataset.n_traj))
    table.add_row("n_train", str(dataset.n_train))
    table.add_row("n_times", str(dataset.n_times))
    table.add_row("dt_sample", f"{dataset.dt_sample:g}")
    table.add_row("bytes", str(Path(out).stat().st_size))
    console.print(table)
    return 0


def cmd_train(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Train the explicit part of an experiment's model on a dataset."""
    run = _run_config(
        args, experiment=args.experiment, scheme=args.scheme, dt=args.dt, epochs=args.epochs,
        dataset=args.dataset, model=args.out, metrics=args.metrics,
    )
    dataset = read_dataset(_require(run.dataset, "dataset"))
    preset = _preset_for(run, dataset)
    scheme = SchemeId.parse(run.scheme)
    dt = preset["dt"]
    steps = run.steps_per_sample or steps_for(dt, dataset.dt_sample)
    cfg = _train_config(run, scheme, dt, steps)

    model = init_weights(preset["dims"], preset["sigma"], run.seed)
    ode = build_ode(preset, model)
    model_path = run.model or "model.imexnn"
    metrics_path = run.metrics or "metrics.csv"

    run_logger = get_run_logger(f"train_{run.experiment}_{scheme.value}", level=logger.level)
    with MetricsWriter(metrics_path, run.provenance()) as writer:
        _, rows = train(ode, dataset, cfg, writer=writer, logger=run_logger)
    save_model(model_path, model)

    table = Table(title=f"Training {run.experiment} with {scheme.value}")
    for name in ("epoch", "train_loss", "test_loss", "nfe_fwd", "nfe_bwd", "lu_count"):
        table.add_column(name, justify="right")
    for row in rows:
        table.add_row(str(row.epoch), _fmt(row.train_loss), _fmt(row.test_loss),
                      str(row.nfe_fwd), str(row.nfe_bwd), str(row.lu_count))
    console.print(table)
    console.print(f"Model written to {model_path}, metrics to {metrics_path}")
    return 0


def cmd_predict(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Roll a model out from one trajectory's initial state and score it snapshot by snapshot."""
    run = _run_config(
        args, experiment=args.experiment, scheme=args.scheme, dt=args.dt,
        dataset=args.dataset, model=args.model,
    )
    dataset = read_dataset(_require(run.dataset, "dataset"))
    model_ref = _require(run.model, "model")
    preset = _preset_for(run, dataset)

    index = args.traj
    if index is None:
        index = dataset.n_train if dataset.n_train < dataset.n_traj else 0
    if not 0 <= index < dataset.n_traj:
        raise ConfigError(f"Trajectory index {index} outside 0..{dataset.n_traj - 1}")

    g = ConvectionField(dataset.grid, dataset.length) if model_ref == "exact" else load_model(model_ref)
    ode = build_ode(preset, g)
    scheme = SchemeId.parse(run.scheme)
    dt = preset["dt"]
    steps = run.steps_per_sample or steps_for(dt, dataset.dt_sample)

    truth = dataset.data[index]
    pred = rollout(ode, scheme, truth[0], dt, steps * (dataset.n_times - 1), every=steps,
                   solver=_solver_config(run), newton_cfg=NewtonConfig())
    norms = np.linalg.norm(truth, axis=1)
    diffs = np.linalg.norm(pred - truth, axis=1)
    errors = np.divide(diffs, norms, out=diffs.copy(), where=norms > 0)

    out = args.out or f"prediction_{index}.csv"
    write_trajectory_csv(out, dataset.times, pred, run.provenance() + [f"trajectory={index}"])
    logger.info(f"Wrote {out}")

    table = Table(title=f"Relative L2 error, trajectory {index} ({scheme.value})")
    table.add_column("snapshot", justify="right")
    table.add_column("t", justify="right")
    table.add_column("error", justify="right")
    for k in range(0, dataset.n_times, args.stride):
        table.add_row(str(k), f"{dataset.times[k]:g}", f"{errors[k]:.6e}")
    console.print(table)
    return 0


def cmd_grad_check(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Adjoint gradients against central finite differences on a small network."""
    run = _run_config(args, scheme=args.scheme)
    scheme = SchemeId.parse(run.scheme)
    dims = [args.dim] + [args.width] * args.depth + [args.dim]
    ode = PartitionedODE(g=kink_free_mlp(dims, run.seed), j=make_ks_stencil(args.dim, args.length))

    rng = np.random.Generator(np.random.Philox(run.seed + 1))
    u_0 = rng.normal(size=(args.dim, args.batch))
    target = rng.normal(size=(args.dim, args.batch))
    report = gradient_check(
        ode, scheme, u_0, args.dt, args.steps, target, n_samples=args.samples, seed=run.seed,
        solver_cfg=_solver_config(run), newton_cfg=NewtonConfig(rtol=1e-13),
    )

    table = Table(title=f"Gradient check {scheme.value}, {args.steps} steps")
    for name in ("index", "adjoint", "finite difference", "rel error"):
        table.add_column(name, justify="right")
    for k, adj, fd, err in zip(report.indices, report.adjoint, report.finite_difference, report.relative_errors):
        table.add_row(str(k), f"{adj:.10e}", f"{fd:.10e}", f"{err:.3e}")
    console.print(table)

    passed = report.max_rel_error < args.tol
    console.print(f"max relative error {report.max_rel_error:.3e} ({'ok' if passed else 'FAILED'})")
    return 0 if passed else 1


def cmd_convergence(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Self-convergence study on the stiff split test problem."""
    run = _run_config(args)
    if args.problem not in CONVERGENCE_PROBLEMS:
        raise ConfigError(f"Unknown test problem '{args.problem}' (choose from {', '.join(CONVERGENCE_PROBLEMS)})")
    J, field, u_0 = stiff_test_problem(CONVERGENCE_PROBLEMS[args.problem])
    ode = PartitionedODE(g=field, j=DenseOperator(J))
    schemes = [SchemeId.parse(s) for s in args.schemes]
    unstable = set()
    for scheme in schemes:
        if scheme.is_explicit:
            try:
                check_linear_stability(ode, scheme, args.dt)
            except UnstableStepError as e:
                logger.warning(f"Skipping {scheme.value} on {args.problem}: {e}")
                unstable.add(scheme)
    results = convergence_study(ode, u_0, [s for s in schemes if s not in unstable], args.dt, args.t_final,
                                levels=args.levels, refine=args.refine)

    table = Table(title=f"Final-time error against a refined self-reference, {args.problem}")
    table.add_column("scheme")
    table.add_column("order", justify="right")
    dts = [args.dt / 2 ** level for level in range(args.levels)]
    for dt in dts:
        table.add_column(f"dt={dt:g}", justify="right")
    table.add_column("slope", justify="right")
    csv_rows: List[Sequence] = []
    for scheme in schemes:
        order = "2" if scheme is SchemeId.CRANK_NICOLSON else str(get_tableau(scheme).order)
        if scheme in unstable:
            table.add_row(scheme.value, order, *["unstable"] * len(dts), "-")
            csv_rows.extend((scheme.value, dt, float("nan")) for dt in dts)
            continue
        result = results[scheme]
        table.add_row(scheme.value, order, *[f"{e:.3e}" for e in result.errors], f"{result.slope:.3f}")
        csv_rows.extend((scheme.value, dt, err) for dt, err in zip(result.dts, result.errors))
    console.print(table)

    out = args.out or "convergence.csv"
    write_table_csv(out, ["scheme", "dt", "error"], csv_rows, run.provenance())
    logger.info(f"Wrote {out}")
    return 0


def cmd_bench_nfe(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Per-epoch work counters of a training run for each scheme."""
    run = _run_config(args, experiment=args.experiment, epochs=args.epochs, dataset=args.dataset, dt=args.dt)
    preset = run.preset()
    if run.dataset:
        dataset = read_dataset(run.dataset)
    else:
        dataset = synthetic_dataset(preset["grid"], preset["length"], preset["sample_interval"],
                                    args.pairs, seed=run.seed)
    preset = _preset_for(run, dataset)
    dt = preset["dt"]
    steps = run.steps_per_sample or steps_for(dt, dataset.dt_sample)
    per = max(run.epochs, 1)

    table = Table(title=f"NFE per epoch, {run.experiment}, dt={dt:g}")
    for name in ("scheme", "stages", "forward", "backward", "lu", "krylov", "status"):
        table.add_column(name, justify="left" if name in ("scheme", "status") else "right")
    csv_rows: List[Sequence] = []
    for name in args.schemes:
        scheme = SchemeId.parse(name)
        stages = "-" if scheme is SchemeId.CRANK_NICOLSON else str(get_tableau(scheme).s)
        cfg = _train_config(run, scheme, dt, steps)
        ode = build_ode(preset, init_weights(preset["dims"], preset["sigma"], run.seed))
        ctr = NfeCounter()
        status = "ok"
        try:
            train(ode, dataset, cfg, logger=logger, counter=ctr)
        except ImexOdeError as e:
            status = f"{type(e).__name__} (exit {e.exit_code})"
        row = (scheme.value, stages, ctr.forward_nfe // per, ctr.backward_vjp_evals // per,
               ctr.lu_factorizations, ctr.krylov_iters // per, status)
        table.add_row(*[str(v) for v in row])
        csv_rows.append(row)
    console.print(table)

    if args.out:
        write_table_csv(args.out, ["scheme", "stages", "forward", "backward", "lu", "krylov", "status"],
                        csv_rows, run.provenance())
        logger.info(f"Wrote {args.out}")
    return 0


def cmd_tabulate(args: argparse.Namespace, console: Console, logger: logging.Logger) -> int:
    """Print a tableau pair and its order-condition residuals."""
    tab = get_tableau(SchemeId.parse(args.scheme))
    for part, rows in format_tableau(tab, args.precision).items():
        table = Table(title=f"{tab.name} {part} (order {tab.order})")
        table.add_column("c", justify="right")
        for j in range(tab.s):
            table.add_column(f"a{j + 1}", justify="right")
        for row in rows:
            table.add_row(*row)
        console.print(table)

    report = verify_order_conditions(tab, min(tab.order, 3))
    table = Table(title=f"Order conditions up to {report.up_to}")
    for name in ("condition", "part", "order", "value", "expected", "residual"):
        table.add_column(name, justify="left" if name in ("condition", "part") else "right")
    for cond in report.conditions:
        table.add_row(cond.name, cond.part, str(cond.order), f"{cond.value:.15g}",
                      f"{cond.expected:.15g}", f"{cond.residual:.2e}")
    console.print(table)
    return 0 if report.passed else 1


COMMANDS: Dict[str, Callable[[argparse.Namespace, Console, logging.Logger], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
    "convergence": cmd_convergence,
    "bench-nfe": cmd_bench_nfe,
    "tabulate": cmd_tabulate,
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per capability."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="Random seed (overrides the config)")
    common.add_argument("--out", type=str, help="Output file")
    common.add_argument("--quiet", action="store_true", help="Only print warnings and errors")

    parser = argparse.ArgumentParser(
        prog="imexode",
        description="Differentiable IMEX Runge-Kutta solver for learning partitioned dynamics",
    )
    parser.add_argument("--version", action="version", version=f"imexode {__version__}")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser("gen-data", parents=[common], help="Generate a KS or Burgers dataset")
    gen_parser.add_argument("--experiment", type=str, help="ks64, ks512, burgers512, burgers1024 or custom")
    gen_parser.add_argument("--n-traj", type=int, help="Number of Burgers trajectories")
    gen_parser.add_argument("--transient", type=float, default=1000.0, help="KS transient to discard (default: 1000)")
    gen_parser.add_argument("--span", type=float, default=200.0, help="KS recorded time span (default: 200)")
    gen_parser.add_argument("--t-final", type=float, default=5.0, help="Burgers final time (default: 5)")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train a model; --out is the model file")
    train_parser.add_argument("--experiment", type=str)
    train_parser.add_argument("--scheme", type=str)
    train_parser.add_argument("--dt", type=float)
    train_parser.add_argument("--epochs", type=int)
    train_parser.add_argument("--dataset", type=str)
    train_parser.add_argument("--metrics", type=str, help="Metrics CSV (default: metrics.csv)")

    predict_parser = subparsers.add_parser("predict", parents=[common], help="Roll out a model and score it")
    predict_parser.add_argument("--experiment", type=str)
    predict_parser.add_argument("--scheme", type=str)
    predict_parser.add_argument("--dt", type=float)
    predict_parser.add_argument("--dataset", type=str)
    predict_parser.add_argument("--model", type=str, help="Model file, or 'exact' for the reference convection")
    predict_parser.add_argument("--traj", type=int, help="Trajectory index (default: first test trajectory)")
    predict_parser.add_argument("--stride", type=int, default=1, help="Print every n-th snapshot (default: 1)")

    grad_parser = subparsers.add_parser("grad-check", parents=[common], help="Adjoint vs finite differences")
    grad_parser.add_argument("--scheme", type=str)
    grad_parser.add_argument("--steps", type=int, default=2)
    grad_parser.add_argument("--dt", type=float, default=0.1)
    grad_parser.add_argument("--dim", type=int, default=8)
    grad_parser.add_argument("--width", type=int, default=16)
    grad_parser.add_argument("--depth", type=int, default=2)
    grad_parser.add_argument("--length", type=float, default=22.0)
    grad_parser.add_argument("--batch", type=int, default=2)
    grad_parser.add_argument("--samples", type=int, default=30)
    grad_parser.add_argument("--tol", type=float, default=1e-5)

    conv_parser = subparsers.add_parser("convergence", parents=[common], help="Observed order of accuracy")
    conv_parser.add_argument("--problem", type=str, default="stiff-quadratic",
                             help=f"Test problem: {', '.join(CONVERGENCE_PROBLEMS)} (default: stiff-quadratic)")
    conv_parser.add_argument("--schemes", nargs="+", default=DEFAULT_CONVERGENCE_SCHEMES)
    conv_parser.add_argument("--dt", type=float, default=0.05)
    conv_parser.add_argument("--t-final", type=float, default=1.0)
    conv_parser.add_argument("--levels", type=int, default=2)
    conv_parser.add_argument("--refine", type=int, default=64)

    bench_parser = subparsers.add_parser("bench-nfe", parents=[common], help="Work counters per scheme")
    bench_parser.add_argument("--experiment", type=str)
    bench_parser.add_argument("--schemes", nargs="+", default=[s.value for s in IMEX_SCHEMES])
    bench_parser.add_argument("--dataset", type=str, help="Dataset (default: synthetic states)")
    bench_parser.add_argument("--epochs", type=int, default=1)
    bench_parser.add_argument("--dt", type=float)
    bench_parser.add_argument("--pairs", type=int, default=64, help="Synthetic training pairs (default: 64)")

    tab_parser = subparsers.add_parser("tabulate", parents=[common], help="Print a tableau pair")
    tab_parser.add_argument("--scheme", type=str, required=True)
    tab_parser.add_argument("--precision", type=int, default=10)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI function."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2

    console = Console(quiet=args.quiet, highlight=False)
    logger = setup_logger("imexode_cli", level=logging.WARNING if args.quiet else logging.INFO)
    try:
        return COMMANDS[args.command](args, console, logger)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        console.print(f"[red]error:[/red] {e}", highlight=False)
        return code
