from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence
import csv
import json
import logging
import os

import numpy as np
from numpy.typing import NDArray
from scipy.stats import binomtest

from .config import Config, config_hash
from .control import DegenerateReferenceError
from .dynamics import Disturbance
from .network import forward, load_checkpoint, save_checkpoint
from .report import PerformanceTable, Report
from .selection import run_contextual_learning, write_trace
from .simulation import ClosedLoop, SimStack
from .trainer import SimulationTrainer
from .trajectory import Environment, Trajectory, trajectory_variants
from .wind import WindContext

logger = logging.getLogger(__name__)

RESULTS_HEADER = ["controller", "env", "trajectory", "rmse_ape_m", "max_ape_m", "n_runs"]
VECTOR_FIELDS = (
    ("x_d", 3),
    ("p", 3),
    ("v", 3),
    ("p_hat", 3),
    ("v_hat", 3),
    ("F_hat", 3),
    ("theta", 25),
    ("M", 3),
    ("F_true", 3),
    ("tau_true", 3),
)
MHE_DUMP_HEADER = (
    ["k"]
    + [f"{name}_{axis}" for name in ("p", "v", "F") for axis in "xyz"]
    + [f"w_{i}" for i in range(9)]
    + [f"y_{i}" for i in range(6)]
    + ["J", "iterations", "converged"]
)


def run_columns() -> list[str]:
    columns = ["t"]
    for name, size in VECTOR_FIELDS:
        columns += [f"{name}_{i}" for i in range(size)]
    return columns + ["f", "context", "model"]


def controller_label(kind: str, budget: int = 3) -> str:
    if kind == "budget":
        return "ThreeContext" if budget == 3 else f"Budget{budget}Context"
    return {"base": "Base", "one": "OneContext", "full": "FullContext"}[kind]


class RunRecord(Report):
    """Per-step log of one closed-loop flight.

    Attributes:
        metadata: Controller kind, environment, trajectory, seed, config hash
            and ``status`` (``complete`` or ``aborted`` with ``reason`` and ``step``).
        rows: One mapping per control step with the fields of :func:`run_columns`.
    """

    def __init__(self, metadata: dict):
        super().__init__("run_episode")
        self.metadata = dict(metadata)
        self.rows: list[dict] = []

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def series(self, name: str) -> NDArray:
        return np.array([row[name] for row in self.rows], dtype=float)

    @property
    def times(self) -> NDArray:
        return self.series("t")

    @property
    def models(self) -> list[str]:
        return [row["model"] for row in self.rows]

    @property
    def contexts(self) -> list[str]:
        return [row["context"] for row in self.rows]

    @property
    def aborted(self) -> bool:
        return self.metadata.get("status") == "aborted"

    @property
    def name(self) -> str:
        m = self.metadata
        return f"{m['controller']}_env{m['env']}_{m['trajectory']}{m.get('variant', 0)}_seed{m['seed']}"

    def write(self, directory: os.PathLike) -> Path:
        """Writes ``<name>.csv`` and the ``<name>.json`` metadata sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(run_columns())
            for row in self.rows:
                values = [repr(float(row["t"]))]
                for name, _ in VECTOR_FIELDS:
                    values += [repr(float(v)) for v in row[name]]
                values += [repr(float(row["f"])), row["context"], row["model"]]
                writer.writerow(values)
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as handle:
            json.dump(self.metadata, handle, indent=2, sort_keys=True)
        return path

    @classmethod
    def read(cls, path: os.PathLike) -> "RunRecord":
        path = Path(path)
        with open(path.with_suffix(".json"), "r", encoding="utf-8") as handle:
            record = cls(json.load(handle))
        with open(path, "r", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            if header != run_columns():
                raise ValueError(f"{path} is not a run record")
            for values in reader:
                row = {"t": float(values[0])}
                offset = 1
                for name, size in VECTOR_FIELDS:
                    row[name] = np.array([float(v) for v in values[offset : offset + size]])
                    offset += size
                row["f"] = float(values[offset])
                row["context"], row["model"] = values[offset + 1], values[offset + 2]
                record.rows.append(row)
        return record


@dataclass(frozen=True)
class Metrics:
    """Absolute position error of one run.

    Attributes:
        ape: APE at every step (m).
        rmse: Root mean square of the APE (m).
        max: Largest APE (m).
    """

    ape: NDArray
    rmse: float
    max: float


def compute_metrics(record: RunRecord) -> Metrics:
    """APE_t = ||p_t - x_d,t||, summarised as RMSE and maximum."""
    if not record.rows:
        raise ValueError("cannot compute metrics of an empty record")
    ape = np.linalg.norm(record.series("p") - record.series("x_d"), axis=1)
    return Metrics(ape=ape, rmse=float(np.sqrt(np.mean(ape**2))), max=float(np.max(ape)))


@dataclass
class ModelBundle:
    """Trained networks with their pool evaluation.

    Attributes:
        nets: Network per model id.
        table: Losses of every model over the pool.
        order: Model ids in selection order.
        budget: Number of models of the budgeted controller.
    """

    nets: dict
    table: PerformanceTable
    order: list
    budget: int = 3

    def controller_table(self, kind: str) -> Optional[PerformanceTable]:
        """Models a controller may switch between; None for the baseline."""
        if kind == "base":
            return None
        if kind == "one":
            return self.table.subset([self.table.best_mean_model()])
        if kind == "budget":
            return self.table.subset(self.order[: self.budget])
        if kind == "full":
            return self.table
        raise ValueError(f"unknown controller kind {kind!r}")

    def save(self, directory: os.PathLike):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for model_id, net in self.nets.items():
            path = directory / f"{model_id}.json"
            if not path.exists():
                save_checkpoint(net, path, {"context": model_id})
        with open(directory / "table.csv", "w", encoding="utf-8", newline="") as handle:
            self.table.write_csv(handle)
        with open(directory / "bundle.json", "w", encoding="utf-8") as handle:
            json.dump({"order": self.order, "budget": self.budget}, handle, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: os.PathLike, pool: Sequence[WindContext]) -> "ModelBundle":
        directory = Path(directory)
        with open(directory / "bundle.json", "r", encoding="utf-8") as handle:
            meta = json.load(handle)
        with open(directory / "table.csv", "r", encoding="utf-8") as handle:
            table = PerformanceTable.read_csv(handle, pool)
        nets = {model_id: load_checkpoint(directory / f"{model_id}.json")[0] for model_id in table.model_ids}
        return cls(nets, table, list(meta["order"]), int(meta["budget"]))


def prepare_models(config: Config, store: Optional[os.PathLike] = None, budget: Optional[int] = None) -> ModelBundle:
    """Runs contextual learning and returns the trained models.

    With the default ``budget`` every pool context is trained, which yields the
    single-model baseline, the budgeted prefix and the full set at once.
    """
    pool = config.pool()
    budget = budget if budget is not None else len(pool)
    trainer = SimulationTrainer(config, pool, store)
    result = run_contextual_learning(pool, budget, trainer, config.gp, config.selection)
    bundle = ModelBundle(
        {model_id: trainer.net(model_id) for model_id in result.model_ids},
        result.table,
        result.model_ids,
        min(config.selection.budget, budget),
    )
    if store is not None:
        bundle.save(store)
        write_trace(result.trace, Path(store) / "trace.json")
    return bundle


def load_or_prepare(config: Config, store: os.PathLike) -> ModelBundle:
    """Loads a full model bundle from a directory, training whatever is missing."""
    store = Path(store)
    pool = config.pool()
    if (store / "bundle.json").exists():
        bundle = ModelBundle.load(store, pool)
        if len(bundle.table) == len(pool):
            return bundle
        logger.info("model bundle in %s holds %d of %d models; training the rest", store, len(bundle.table), len(pool))
    return prepare_models(config, store)


class InnovationClassifier:
    """Classifies the context from the running mean of the estimated wind force."""

    def __init__(self, pool: Sequence[WindContext], window: int = 25):
        self.pool = list(pool)
        self.window = window
        self.history: list[NDArray] = []

    def __call__(self, force_estimate: NDArray) -> WindContext:
        self.history = (self.history + [np.asarray(force_estimate, dtype=float)])[-self.window :]
        mean = np.mean(self.history, axis=0)
        distances = [np.linalg.norm(np.asarray(ctx.mean_force) - mean) for ctx in self.pool]
        return self.pool[int(np.argmin(distances))]


def run_episode(
    env: Environment,
    traj: Trajectory,
    controller_kind: str,
    models: Optional[ModelBundle],
    seed: int,
    config: Config,
    variant: int = 0,
    dump: Optional[list] = None,
) -> RunRecord:
    """Flies one trajectory through an environment with one controller.

    ``base`` uses the EKF and ignores the disturbance estimate. The other
    kinds emit MHE weights with the model chosen for the classified context,
    re-selected whenever the classification changes, and compensate the
    estimated disturbance.

    Args:
        env: Wind layout of the flight volume.
        traj: Setpoint stream.
        controller_kind: ``base``, ``one``, ``budget`` or ``full``.
        models: Trained models; required unless ``controller_kind`` is ``base``.
        seed: Run seed; noise and turbulence are drawn from it and the variant index.
        config: Resolved configuration.
        variant: Index of the trajectory variant, recorded in the metadata.
        dump: Receives one MHE row per step when given.

    Returns:
        The record; a diverging flight is stopped and marked ``aborted``.
    """
    stack = SimStack.from_config(config)
    table = models.controller_table(controller_kind) if models is not None else None
    if controller_kind != "base" and table is None:
        raise ValueError(f"controller {controller_kind!r} needs trained models")
    record = RunRecord(
        {
            "controller": controller_kind,
            "env": env.env_id,
            "trajectory": traj.kind,
            "variant": variant,
            "seed": seed,
            "config_hash": config_hash(config),
            "status": "complete",
        }
    )
    loop = ClosedLoop(stack, env.context_at, traj, seed * 10 + variant)
    base = controller_kind == "base"
    estimator = stack.ekf_estimator(traj.start) if base else stack.mhe_estimator(traj.start, config.train.features)
    rotational = stack.rotational_estimator() if config.estimator.rotational and not base else None
    rotational_weights = config.estimator.rotational_mhe_weights()
    classifier = InnovationClassifier(config.pool()) if config.experiment.classifier == "innovation" else None
    control, moment = None, None
    classified, model_id = None, "" if base else None
    estimate_state = np.concatenate([traj.start, np.zeros(6)])

    for k in range(traj.steps(stack.dt)):
        try:
            measurement = loop.measure()
            active = loop.context()
            theta = np.full(25, np.nan)
            if base:
                estimate = estimator.step(measurement, control)
                dist = Disturbance.zero()
            else:
                current = classifier(estimate_state[6:9]) if classifier is not None else active
                if current != classified:
                    classified = current
                    selected = table.select_model_at_test(current)
                    if selected != model_id:
                        logger.debug("t=%.2f: switching to model %s", loop.time, selected)
                    model_id = selected
                weights = forward(models.nets[model_id], estimator.features(measurement))
                theta = weights.theta
                estimate = estimator.step(measurement, control, weights)
                torque = np.zeros(3)
                if rotational is not None:
                    gyro = loop.measure_gyro()
                    torque = rotational.step(gyro, moment, rotational_weights).state[3:6]
                dist = Disturbance(force=estimate.state[6:9], torque=torque)
                if dump is not None:
                    dump.append(mhe_dump_row(k, estimate, measurement.y))
            estimate_state = estimate.state
            row = {
                "t": loop.time,
                "x_d": loop.setpoint().x_d,
                "p": loop.state.p,
                "v": loop.state.v,
                "p_hat": estimate.state[0:3],
                "v_hat": estimate.state[3:6],
                "F_hat": estimate.state[6:9],
                "theta": theta,
                "context": active.name,
                "model": model_id,
            }
            control = loop.act(estimate.state, dist)
            moment = loop.last_control.M
            record.append(
                **row,
                f=loop.last_control.f,
                M=loop.last_control.M,
                F_true=loop.last_disturbance.force,
                tau_true=loop.last_disturbance.torque,
            )
        except (ValueError, ArithmeticError, DegenerateReferenceError) as error:
            logger.warning("run %s aborted at step %d: %s", record.name, k, error)
            record.metadata.update(status="aborted", reason=str(error), step=k)
            record.successful = False
            record.raised_exception = error
            return record
    record.successful = True
    return record


def mhe_dump_row(k: int, estimate, y: NDArray) -> list:
    solution = estimate.solution
    noise = solution.noises[-1] if len(solution.noises) else np.zeros(9)
    return (
        [k]
        + [repr(float(v)) for v in estimate.state]
        + [repr(float(v)) for v in noise]
        + [repr(float(v)) for v in y]
        + [repr(float(solution.cost)), solution.iterations, int(solution.converged)]
    )


def write_mhe_dump(rows: list, path: os.PathLike):
    with open(Path(path), "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MHE_DUMP_HEADER)
        writer.writerows(rows)


@dataclass(frozen=True)
class CellResult:
    """Pooled metrics of all runs of one controller, environment and trajectory."""

    controller: str
    env: str
    trajectory: str
    rmse: float
    max_ape: float
    n_runs: int

    def row(self) -> list:
        if self.n_runs == 0:
            return [self.controller, self.env, self.trajectory, "", "", 0]
        return [self.controller, self.env, self.trajectory, f"{self.rmse:.6f}", f"{self.max_ape:.6f}", self.n_runs]


def aggregate_cell(controller: str, env: str, trajectory: str, records: Sequence[RunRecord]) -> CellResult:
    """Pooled RMSE over every step of every completed run and the mean of the per-run maximum APE."""
    complete = [r for r in records if not r.aborted and len(r)]
    if not complete:
        return CellResult(controller, env, trajectory, float("nan"), float("nan"), 0)
    metrics = [compute_metrics(r) for r in complete]
    ape = np.concatenate([m.ape for m in metrics])
    return CellResult(
        controller,
        env,
        trajectory,
        float(np.sqrt(np.mean(ape**2))),
        float(np.mean([m.max for m in metrics])),
        len(complete),
    )


def write_results(cells: Sequence[CellResult], path: os.PathLike):
    with open(Path(path), "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for cell in cells:
            writer.writerow(cell.row())


def percent_reduction(reference: float, value: float) -> str:
    """Empty when the reference is zero."""
    if reference == 0.0:
        return ""
    return f"{100.0 * (reference - value) / reference:.3f}"


def improvement_rows(cells: Sequence[CellResult]) -> list[list]:
    """Percent reduction of RMSE and maximum APE relative to the single-model and baseline controllers.

    Baseline cells get no rows of their own.
    """
    by_key = {(c.controller, c.env, c.trajectory): c for c in cells}
    rows = []
    for cell in cells:
        if cell.controller == "Base" or cell.n_runs == 0:
            continue
        for reference in ("OneContext", "Base"):
            other = by_key.get((reference, cell.env, cell.trajectory))
            if other is None or other.controller == cell.controller or other.n_runs == 0:
                continue
            rows.append(
                [
                    cell.controller,
                    cell.env,
                    cell.trajectory,
                    reference,
                    percent_reduction(other.rmse, cell.rmse),
                    percent_reduction(other.max_ape, cell.max_ape),
                ]
            )
    return rows


@dataclass(frozen=True)
class SignTest:
    better: str
    worse: str
    metric: str
    wins: int
    trials: int
    p_value: float


def ordering_sign_test(per_seed: dict, better: str, worse: str, metric: str) -> SignTest:
    """One-sided sign test that `better` has a lower metric than `worse` across seeds.

    Args:
        per_seed: ``{controller: {seed: value}}`` of pool-averaged metrics.
        better, worse: Controller labels.
        metric: Name recorded in the result.

    Seeds where both are equal are dropped.
    """
    seeds = sorted(set(per_seed.get(better, {})) & set(per_seed.get(worse, {})))
    differences = [per_seed[worse][s] - per_seed[better][s] for s in seeds]
    wins = sum(d > 0 for d in differences)
    trials = sum(d != 0 for d in differences)
    p_value = binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return SignTest(better, worse, metric, wins, trials, float(p_value))


def per_seed_metrics(records: Sequence[RunRecord], budget: int = 3) -> dict:
    """Pool-averaged RMSE and maximum APE per controller and seed, over all cells."""
    values: dict = {}
    for record in records:
        if record.aborted or not len(record):
            continue
        m = compute_metrics(record)
        label = controller_label(record.metadata["controller"], budget)
        cell = (record.metadata["env"], record.metadata["trajectory"])
        entry = values.setdefault(label, {}).setdefault(record.metadata["seed"], {}).setdefault(cell, [])
        entry.append(m)
    result = {"rmse": {}, "max_ape": {}}
    for label, seeds in values.items():
        for seed, cells in seeds.items():
            rmse = [np.sqrt(np.mean(np.concatenate([m.ape for m in ms]) ** 2)) for ms in cells.values()]
            peak = [np.mean([m.max for m in ms]) for ms in cells.values()]
            result["rmse"].setdefault(label, {})[seed] = float(np.mean(rmse))
            result["max_ape"].setdefault(label, {})[seed] = float(np.mean(peak))
    return result


def ordering_tests(records: Sequence[RunRecord], budget: int = 3) -> list[SignTest]:
    metrics = per_seed_metrics(records, budget)
    three = controller_label("budget", budget)
    tests = []
    for metric in ("rmse", "max_ape"):
        tests.append(ordering_sign_test(metrics[metric], three, "OneContext", metric))
        tests.append(ordering_sign_test(metrics[metric], "FullContext", three, metric))
    return tests


def _run_job(config: Config, env_id: str, kind: str, variant: int, traj: Trajectory, seed: int, models) -> RunRecord:
    env = Environment.from_layout(env_id, config.experiment.layouts[env_id], config.pool(), config.experiment.no_wind_margin)
    return run_episode(env, traj, kind, models, seed, config, variant)


@dataclass
class SuiteResult:
    cells: list = field(default_factory=list)
    records: list = field(default_factory=list)
    sign_tests: list = field(default_factory=list)


def run_suite(config: Config, models: Optional[ModelBundle], out_dir: os.PathLike) -> SuiteResult:
    """Flies every environment, trajectory, controller and seed and writes the result tables.

    Writes ``results.csv``, ``improvement.csv``, ``ordering.csv``, the run
    records under ``runs/`` and the APE series under ``series/``. Cells
    without a completed run keep an empty row.
    """
    exp = config.experiment
    out_dir = Path(out_dir)
    jobs = []
    for env_id in exp.envs:
        for kind in exp.trajectories:
            for variant, traj in enumerate(trajectory_variants(kind, exp.speed, exp.rise, exp.hover_hold)):
                for controller in exp.controllers:
                    for seed in exp.seeds:
                        jobs.append((env_id, controller, variant, traj, seed))

    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as executor:
            futures = [executor.submit(_run_job, config, e, c, v, t, s, models) for e, c, v, t, s in jobs]
            records = [future.result() for future in futures]
    else:
        records = [_run_job(config, e, c, v, t, s, models) for e, c, v, t, s in jobs]
    logger.info("completed %d runs", len(records))

    budget = models.budget if models is not None else config.selection.budget
    result = SuiteResult(records=records)
    for controller in exp.controllers:
        for env_id in exp.envs:
            for kind in exp.trajectories:
                cell_records = [
                    r
                    for r in records
                    if r.metadata["controller"] == controller
                    and r.metadata["env"] == env_id
                    and r.metadata["trajectory"] == kind
                ]
                cell = aggregate_cell(controller_label(controller, budget), env_id, kind, cell_records)
                if cell.n_runs == 0:
                    logger.warning("no completed run for %s / env %s / %s", cell.controller, env_id, kind)
                result.cells.append(cell)
    result.sign_tests = ordering_tests(records, budget)

    out_dir.mkdir(parents=True, exist_ok=True)
    for record in records:
        record.write(out_dir / "runs")
    write_results(result.cells, out_dir / "results.csv")
    with open(out_dir / "improvement.csv", "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["controller", "env", "trajectory", "reference", "rmse_reduction_pct", "max_ape_reduction_pct"])
        writer.writerows(improvement_rows(result.cells))
    write_sign_tests(result.sign_tests, out_dir / "ordering.csv")
    write_plot_series(records, out_dir / "series")
    return result


def write_sign_tests(tests: Sequence[SignTest], path: os.PathLike):
    with open(Path(path), "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["better", "worse", "metric", "wins", "trials", "p_value"])
        for t in tests:
            writer.writerow([t.better, t.worse, t.metric, t.wins, t.trials, f"{t.p_value:.6g}"])


def read_runs(directory: os.PathLike) -> list[RunRecord]:
    return [RunRecord.read(path) for path in sorted(Path(directory).glob("*.csv"))]


def evaluate_runs(directory: os.PathLike, budget: int = 3) -> list[CellResult]:
    """Rebuilds the results table from stored run records."""
    records = read_runs(directory)
    groups: dict = {}
    for record in records:
        m = record.metadata
        groups.setdefault((controller_label(m["controller"], budget), m["env"], m["trajectory"]), []).append(record)
    return [aggregate_cell(*key, groups[key]) for key in sorted(groups)]


def write_plot_series(records: Sequence[RunRecord], directory: os.PathLike):
    """APE over time per run and the per-cell mean maximum APE, as CSV for external plotting."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary: dict = {}
    for record in records:
        if not len(record):
            continue
        metrics = compute_metrics(record)
        with open(directory / f"ape_{record.name}.csv", "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["t", "ape_m", "context", "model"])
            for row, ape in zip(record.rows, metrics.ape):
                writer.writerow([f"{row['t']:.2f}", repr(float(ape)), row["context"], row["model"]])
        m = record.metadata
        summary.setdefault((m["controller"], m["env"], m["trajectory"]), []).append(metrics.max)
    with open(directory / "max_ape_summary.csv", "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["controller", "env", "trajectory", "mean_max_ape_m", "n_runs"])
        for key in sorted(summary):
            writer.writerow([*key, f"{np.mean(summary[key]):.6f}", len(summary[key])])
