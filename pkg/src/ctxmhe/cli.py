import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import CONTROLLER_KINDS, TRAJECTORY_KINDS, Config, load_config
from .harness import (
    ModelBundle,
    compute_metrics,
    evaluate_runs,
    load_or_prepare,
    ordering_tests,
    prepare_models,
    read_runs,
    run_episode,
    run_suite,
    write_mhe_dump,
    write_plot_series,
    write_results,
    write_sign_tests,
)
from .network import WeightNet
from .sensitivity import gradcheck
from .simulation import SimStack
from .trainer import SimulationTrainer
from .training import end_to_end_gradcheck
from .trajectory import Environment, make_trajectory, trajectory_variants

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _config(args) -> Config:
    if args.config is not None and not Path(args.config).exists():
        raise FileNotFoundError(f"Config file not found: {args.config}")
    return load_config(args.config)


def cmd_select(args) -> int:
    config = _config(args)
    bundle = prepare_models(config, args.out, budget=args.budget)
    bundle.table.write_csv(sys.stdout)
    print(f"selected: {', '.join(bundle.order)}")
    print(f"V = {bundle.table.get_total_loss():.6f}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    ctx = config.context(args.context)
    trainer = SimulationTrainer(config, store=args.out)
    model = trainer.train(ctx)
    result = trainer.results.get(ctx.name)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if result is not None:
        writer.writerow(["episode", "loss", "time_s"])
        for episode, (loss, time) in enumerate(zip(result.loss_history, result.timestamps)):
            writer.writerow([episode, repr(loss), f"{time:.2f}"])
    print(f"{model.model_id}: training loss {model.training_loss:.6f} (converged: {model.converged})")
    return 0


def cmd_simulate(args) -> int:
    config = _config(args)
    exp = config.experiment
    if args.env not in exp.layouts:
        raise ValueError(f"environment {args.env!r} has no layout")
    env = Environment.from_layout(args.env, exp.layouts[args.env], config.pool(), exp.no_wind_margin)
    variants = trajectory_variants(args.traj, exp.speed, exp.rise, exp.hover_hold)
    if not 0 <= args.variant < len(variants):
        raise ValueError(f"trajectory {args.traj} has {len(variants)} variant(s)")
    models: Optional[ModelBundle] = None
    if args.controller != "base":
        models = load_or_prepare(config, args.models)
    dump = [] if args.dump_mhe is not None else None
    record = run_episode(env, variants[args.variant], args.controller, models, args.seed, config, args.variant, dump)
    path = record.write(args.out)
    if dump is not None:
        write_mhe_dump(dump, args.dump_mhe)
    if record.aborted:
        print(f"{path}: aborted at step {record.metadata['step']}: {record.metadata['reason']}")
        return 1
    metrics = compute_metrics(record)
    print(f"{path}: rmse_ape_m={metrics.rmse:.6f} max_ape_m={metrics.max:.6f}")
    return 0


def cmd_suite(args) -> int:
    config = _config(args)
    needs_models = any(kind != "base" for kind in config.experiment.controllers)
    models = load_or_prepare(config, args.models) if needs_models else None
    result = run_suite(config, models, args.out)
    for cell in result.cells:
        print(",".join(str(v) for v in cell.row()))
    for test in result.sign_tests:
        print(f"{test.better} < {test.worse} ({test.metric}): {test.wins}/{test.trials}, p = {test.p_value:.4g}")
    return 0


def cmd_eval(args) -> int:
    cells = evaluate_runs(args.runs, args.budget)
    write_results(cells, args.out)
    for cell in cells:
        print(",".join(str(v) for v in cell.row()))
    tests = ordering_tests(read_runs(args.runs), args.budget)
    if args.ordering is not None:
        write_sign_tests(tests, args.ordering)
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck(args.instances, args.seed, args.horizon, args.step)
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["component", "name", "max_abs_error", "max_rel_error"])
        for row in rows:
            writer.writerow([row.component, row.name, f"{row.max_abs_error:.3e}", f"{row.max_rel_error:.3e}"])
        if args.end_to_end:
            config = _config(args)
            train_cfg = config.train
            net = WeightNet.initialise(
                np.random.default_rng(args.seed), train_cfg.initial_mhe_weights(), train_cfg.init_scale
            )
            trajectory = make_trajectory("line", config.experiment.speed, config.experiment.rise)
            checks = end_to_end_gradcheck(
                net, config.context(args.context), train_cfg, SimStack.from_config(config), trajectory, args.seed
            )
            worst = max(checks, key=lambda c: c.rel_error)
            writer.writerow(["network", f"parameter[{worst.index}]", f"{abs(worst.analytic - worst.numeric):.3e}", f"{worst.rel_error:.3e}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_plot(args) -> int:
    records = read_runs(args.runs)
    write_plot_series(records, args.out)
    print(f"wrote {len(records)} APE series to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxmhe", description="Context-aware learned moving horizon estimation for quadrotor wind rejection."
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Log debug messages.")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Log warnings and errors only.")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", type=str, default=None, help="Path to JSON configuration file.")
        return sub

    select = with_config(commands.add_parser("select", help="Run budgeted contextual learning."))
    select.add_argument("--budget", type=int, required=True, help="Number of contexts to train in.")
    select.add_argument("--out", type=str, default="models", help="Model directory.")
    select.set_defaults(func=cmd_select)

    train = with_config(commands.add_parser("train", help="Train one context to convergence."))
    train.add_argument("--context", type=str, required=True, help="Context name, e.g. headwind-low.")
    train.add_argument("--out", type=str, default="models", help="Model directory.")
    train.set_defaults(func=cmd_train)

    simulate = with_config(commands.add_parser("simulate", help="Fly one closed-loop run."))
    simulate.add_argument("--env", type=str, required=True, help="Environment id.")
    simulate.add_argument("--traj", choices=TRAJECTORY_KINDS, required=True)
    simulate.add_argument("--controller", choices=CONTROLLER_KINDS, required=True)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--variant", type=int, default=0, help="Hover corner index.")
    simulate.add_argument("--models", type=str, default="models", help="Model directory.")
    simulate.add_argument("--out", type=str, default="runs", help="Run record directory.")
    simulate.add_argument("--dump-mhe", type=str, default=None, help="Write the per-step MHE solution CSV.")
    simulate.set_defaults(func=cmd_simulate)

    suite = with_config(commands.add_parser("suite", help="Fly every environment, trajectory, controller and seed."))
    suite.add_argument("--models", type=str, default="models", help="Model directory.")
    suite.add_argument("--out", type=str, default="results", help="Output directory.")
    suite.set_defaults(func=cmd_suite)

    evaluate = commands.add_parser("eval", help="Tabulate stored run records.")
    evaluate.add_argument("--runs", type=str, required=True, help="Run record directory.")
    evaluate.add_argument("--out", type=str, required=True, help="Results CSV.")
    evaluate.add_argument("--ordering", type=str, default=None, help="Sign-test CSV.")
    evaluate.add_argument("--budget", type=int, default=3, help="Budget of the budgeted controller.")
    evaluate.set_defaults(func=cmd_eval)

    check = with_config(commands.add_parser("gradcheck", help="Compare analytic and finite-difference gradients."))
    check.add_argument("--instances", type=int, default=20)
    check.add_argument("--horizon", type=int, default=10)
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--step", type=float, default=1e-5, help="Finite-difference step.")
    check.add_argument("--out", type=str, default=None, help="CSV file instead of stdout.")
    check.add_argument("--end-to-end", action="store_true", help="Also check the network gradient in closed loop.")
    check.add_argument("--context", type=str, default="headwind-low", help="Context of the end-to-end check.")
    check.set_defaults(func=cmd_gradcheck)

    plot = commands.add_parser("plot", help="Emit APE series of stored runs for plotting.")
    plot.add_argument("--runs", type=str, required=True, help="Run record directory.")
    plot.add_argument("--out", type=str, required=True, help="Series directory.")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as error:
        logger.error("%s", error)
        return 2
