import tempfile
import unittest
from pathlib import Path

import numpy as np

from ctxmhe.config import load_config
from ctxmhe.harness import (
    CellResult,
    ModelBundle,
    RunRecord,
    aggregate_cell,
    compute_metrics,
    controller_label,
    evaluate_runs,
    improvement_rows,
    ordering_sign_test,
    ordering_tests,
    per_seed_metrics,
    run_episode,
    run_suite,
)
from ctxmhe.network import WeightNet
from ctxmhe.report import PerformanceTable
from ctxmhe.trajectory import Environment, Trajectory, make_trajectory

RESOURCES = Path(__file__).parent.parent / "resources"


def make_record(errors, seed=0, controller="base", status="complete"):
    """A record whose position errors along x are `errors`."""
    record = RunRecord(
        {"controller": controller, "env": "1", "trajectory": "hover", "variant": 0, "seed": seed, "status": status}
    )
    for k, error in enumerate(errors):
        record.append(
            t=0.02 * k,
            x_d=np.zeros(3),
            p=np.array([error, 0.0, 0.0]),
            v=np.zeros(3),
            p_hat=np.zeros(3),
            v_hat=np.zeros(3),
            F_hat=np.zeros(3),
            theta=np.full(25, np.nan),
            f=0.3,
            M=np.zeros(3),
            F_true=np.zeros(3),
            tau_true=np.zeros(3),
            context="no-wind",
            model="",
        )
    return record


def context_bundle(config):
    """One initialised network per context; each model is best in its own context."""
    pool = config.pool()
    rng = np.random.default_rng(0)
    table = PerformanceTable(pool)
    nets = {}
    for ctx in pool:
        nets[ctx.name] = WeightNet.initialise(rng, config.train.initial_mhe_weights(), config.train.init_scale)
        table.update_value(ctx.name, [0.0 if other.key == ctx.key else 1.0 for other in pool])
    return ModelBundle(nets, table, [ctx.name for ctx in pool], budget=3)


class TestMetrics(unittest.TestCase):

    def test_compute_metrics(self):
        metrics = compute_metrics(make_record([3.0, 0.0, 4.0]))
        np.testing.assert_allclose(metrics.ape, [3.0, 0.0, 4.0])
        self.assertAlmostEqual(metrics.rmse, np.sqrt(25.0 / 3.0))
        self.assertEqual(metrics.max, 4.0)
        with self.assertRaises(ValueError):
            compute_metrics(make_record([]))

    def test_aggregate_pools_steps(self):
        """RMSE is pooled over all steps; the maximum is averaged over runs; aborted runs are left out."""
        records = [make_record([1.0, 1.0]), make_record([3.0]), make_record([9.0], status="aborted")]
        cell = aggregate_cell("Base", "1", "hover", records)
        self.assertAlmostEqual(cell.rmse, np.sqrt(11.0 / 3.0))
        self.assertAlmostEqual(cell.max_ape, 2.0)
        self.assertEqual(cell.n_runs, 2)

    def test_empty_cell(self):
        cell = aggregate_cell("Base", "1", "hover", [make_record([1.0], status="aborted")])
        self.assertEqual(cell.n_runs, 0)
        self.assertEqual(cell.row(), ["Base", "1", "hover", "", "", 0])

    def test_improvement(self):
        cells = [CellResult("Base", "1", "hover", 2.0, 4.0, 5), CellResult("OneContext", "1", "hover", 1.0, 3.0, 5)]
        rows = improvement_rows(cells)
        self.assertEqual(rows, [["OneContext", "1", "hover", "Base", "50.000", "25.000"]])

    def test_improvement_skips_baseline_rows(self):
        cells = [
            CellResult("Base", "1", "hover", 2.0, 4.0, 5),
            CellResult("OneContext", "1", "hover", 1.0, 3.0, 5),
            CellResult("ThreeContext", "1", "hover", 0.5, 1.5, 5),
        ]
        rows = improvement_rows(cells)
        self.assertEqual([row[0] for row in rows], ["OneContext", "ThreeContext", "ThreeContext"])
        self.assertEqual(rows[1], ["ThreeContext", "1", "hover", "OneContext", "50.000", "50.000"])

    def test_improvement_over_perfect_reference(self):
        cells = [CellResult("Base", "1", "hover", 0.0, 0.0, 5), CellResult("OneContext", "1", "hover", 1.0, 3.0, 5)]
        self.assertEqual(improvement_rows(cells), [["OneContext", "1", "hover", "Base", "", ""]])

    def test_sign_test(self):
        per_seed = {"ThreeContext": {0: 1.0, 1: 1.0, 2: 1.0, 3: 2.0}, "OneContext": {0: 2.0, 1: 2.0, 2: 2.0, 3: 2.0}}
        test = ordering_sign_test(per_seed, "ThreeContext", "OneContext", "rmse")
        self.assertEqual((test.wins, test.trials), (3, 3))
        self.assertAlmostEqual(test.p_value, 0.125)
        empty = ordering_sign_test({}, "ThreeContext", "OneContext", "rmse")
        self.assertEqual((empty.trials, empty.p_value), (0, 1.0))

    def test_labels(self):
        self.assertEqual(controller_label("budget"), "ThreeContext")
        self.assertEqual(controller_label("budget", 5), "Budget5Context")
        self.assertEqual(controller_label("full"), "FullContext")

    def test_record_round_trip(self):
        record = make_record([0.1, 0.2])
        with tempfile.TemporaryDirectory() as tmp:
            path = record.write(tmp)
            self.assertEqual(path.name, "base_env1_hover0_seed0.csv")
            again = RunRecord.read(path)
        self.assertEqual(again.metadata, record.metadata)
        np.testing.assert_array_equal(again.series("p"), record.series("p"))
        self.assertEqual(again.models, ["", ""])


class TestModelBundle(unittest.TestCase):

    def setUp(self):
        self.config = load_config(RESOURCES / "quick.json")
        self.bundle = context_bundle(self.config)

    def test_controller_tables(self):
        self.assertIsNone(self.bundle.controller_table("base"))
        self.assertEqual(self.bundle.controller_table("one").model_ids, ["no-wind"])
        self.assertEqual(len(self.bundle.controller_table("budget")), 3)
        self.assertEqual(len(self.bundle.controller_table("full")), 13)
        with self.assertRaises(ValueError):
            self.bundle.controller_table("oracle")

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.bundle.save(tmp)
            again = ModelBundle.load(tmp, self.config.pool())
        self.assertEqual(again.order, self.bundle.order)
        np.testing.assert_array_equal(again.table.matrix, self.bundle.table.matrix)
        np.testing.assert_array_equal(again.nets["updraft-low"].parameters(), self.bundle.nets["updraft-low"].parameters())


class TestRunEpisode(unittest.TestCase):

    def setUp(self):
        self.config = load_config(RESOURCES / "quick.json")
        exp = self.config.experiment
        self.env = Environment.from_layout("1", exp.layouts["1"], self.config.pool())
        self.hover = make_trajectory("hover", exp.speed, exp.rise, exp.hover_hold)

    def test_baseline_flight(self):
        record = run_episode(self.env, self.hover, "base", None, 0, self.config)
        self.assertFalse(record.aborted)
        self.assertTrue(record.successful)
        self.assertEqual(len(record), self.hover.steps(0.02))
        self.assertEqual(set(record.models), {""})
        self.assertEqual(set(record.contexts), {"headwind-high"})
        self.assertTrue(np.all(np.isnan(record.series("theta"))))
        self.assertTrue(np.all(np.isfinite(record.series("p"))))

    def test_flights_are_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = run_episode(self.env, self.hover, "base", None, 3, self.config).write(Path(tmp) / "a")
            second = run_episode(self.env, self.hover, "base", None, 3, self.config).write(Path(tmp) / "b")
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_model_follows_context(self):
        """Crossing into another quadrant switches to the model trained there."""
        trajectory = Trajectory("line", ((-0.3, -0.3, 0.0), (-0.3, -0.3, 0.2), (0.5, -0.3, 0.2)), 0.3, hold=0.5)
        record = run_episode(self.env, trajectory, "full", context_bundle(self.config), 0, self.config)
        self.assertFalse(record.aborted)
        self.assertEqual(record.models, record.contexts)
        self.assertEqual(record.models[0], "headwind-high")
        self.assertEqual(record.models[-1], "no-wind")
        self.assertTrue(np.all(np.isfinite(record.series("theta"))))

    def test_learned_controller_needs_models(self):
        with self.assertRaises(ValueError):
            run_episode(self.env, self.hover, "full", None, 0, self.config)


class TestSuite(unittest.TestCase):

    def test_suite_writes_tables(self):
        config = load_config(RESOURCES / "quick.json").with_section("experiment", controllers=("base", "full"))
        with tempfile.TemporaryDirectory() as tmp:
            result = run_suite(config, context_bundle(config), tmp)
            out = Path(tmp)
            for name in ("results.csv", "improvement.csv", "ordering.csv", "series/max_ape_summary.csv"):
                self.assertTrue((out / name).exists(), name)
            self.assertEqual(len(list((out / "runs").glob("*.csv"))), 8)
            rebuilt = {(c.controller, c.env, c.trajectory): c for c in evaluate_runs(out / "runs")}
        self.assertEqual([c.controller for c in result.cells], ["Base", "FullContext"])
        for cell in result.cells:
            self.assertEqual(cell.n_runs, 4)
            self.assertAlmostEqual(rebuilt[(cell.controller, cell.env, cell.trajectory)].rmse, cell.rmse)


class TestOrdering(unittest.TestCase):

    def seeded_records(self, levels, seeds=range(6)):
        """Runs in two cells whose error level per controller is `levels`, jittered per seed."""
        records = []
        for seed in seeds:
            for trajectory in ("hover", "square"):
                for controller, level in levels.items():
                    errors = level * (1.0 + 0.1 * seed) * np.array([1.0, 2.0, 0.5])
                    record = make_record(errors, seed=seed, controller=controller)
                    record.metadata["trajectory"] = trajectory
                    records.append(record)
        return records

    def test_per_seed_metrics_pool_cells(self):
        records = self.seeded_records({"one": 1.0}, seeds=[0])
        metrics = per_seed_metrics(records)
        expected = np.sqrt(np.mean(np.array([1.0, 2.0, 0.5]) ** 2))
        self.assertAlmostEqual(metrics["rmse"]["OneContext"][0], expected)
        self.assertAlmostEqual(metrics["max_ape"]["OneContext"][0], 2.0)

    def test_consistent_ordering_is_significant(self):
        """Six seeds that all agree give p = 0.5**6 for each ordering."""
        tests = ordering_tests(self.seeded_records({"one": 3.0, "budget": 2.0, "full": 1.0}))
        self.assertEqual(
            [(t.better, t.worse, t.metric) for t in tests],
            [
                ("ThreeContext", "OneContext", "rmse"),
                ("FullContext", "ThreeContext", "rmse"),
                ("ThreeContext", "OneContext", "max_ape"),
                ("FullContext", "ThreeContext", "max_ape"),
            ],
        )
        for test in tests:
            self.assertEqual((test.wins, test.trials), (6, 6))
            self.assertAlmostEqual(test.p_value, 0.015625)
            self.assertLess(test.p_value, 0.05)

    def test_reversed_ordering_is_not_significant(self):
        tests = ordering_tests(self.seeded_records({"one": 1.0, "budget": 2.0, "full": 2.0}))
        three_vs_one, full_vs_three = tests[0], tests[1]
        self.assertEqual((three_vs_one.wins, three_vs_one.trials), (0, 6))
        self.assertAlmostEqual(three_vs_one.p_value, 1.0)
        self.assertEqual((full_vs_three.trials, full_vs_three.p_value), (0, 1.0))

    def test_aborted_runs_are_left_out(self):
        records = self.seeded_records({"one": 3.0, "budget": 2.0}, seeds=[0, 1])
        records.append(make_record([0.0], seed=2, controller="budget", status="aborted"))
        metrics = per_seed_metrics(records)
        self.assertEqual(sorted(metrics["rmse"]["ThreeContext"]), [0, 1])


if __name__ == "__main__":
    unittest.main()
