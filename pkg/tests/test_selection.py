import tempfile
import unittest
from pathlib import Path

import numpy as np

from ctxmhe.config import GpConfig, SelectionConfig
from ctxmhe.gp import GpModel
from ctxmhe.report import PerformanceTable
from ctxmhe.selection import (
    GapModel,
    acquisition,
    fit_gp,
    read_trace,
    run_contextual_learning,
    select_next_context,
    write_trace,
)
from ctxmhe.trainer import ContextTrainer, TrainedModel
from ctxmhe.wind import enumerate_contexts


class LandscapeTrainer(ContextTrainer):
    """Models whose loss grows with the distance between training and evaluation context."""

    def __init__(self, pool, slope=0.3, offsets=None):
        super().__init__(pool)
        self.slope = slope
        self.offsets = offsets or {}
        self.trained = {}
        self.calls = []

    def base(self, ctx):
        return 0.2 + 0.05 * ctx.direction_code + 0.1 * ctx.speed_level + self.offsets.get(ctx.key, 0.0)

    def train(self, ctx):
        self.calls.append(ctx.name)
        self.trained[ctx.name] = ctx
        return TrainedModel(ctx.name, ctx, self.base(ctx))

    def evaluate(self, model_id, ctx):
        origin = self.trained[model_id]
        return self.base(origin) + self.slope * origin.point.distance(ctx.point)


def brute_force_acquisition(candidate, table, gp, beta, alpha, pool, floor):
    mean, variance = gp.posterior(candidate.embed())
    values = []
    for other in pool:
        best = -table.get_context_loss(other) if len(table) else floor
        gap = alpha * np.linalg.norm(candidate.embed() - other.embed())
        values.append(max(mean + np.sqrt(beta) * np.sqrt(variance) - gap - best, 0.0))
    return float(np.mean(values))


def greedy_oracle(pool, trainer, budget, beta, alpha, floor=-1e3):
    """Greedy selection written out directly: score every open context, train the best, repeat."""
    table, gp, chosen = PerformanceTable(pool), GpModel(), []
    for _ in range(budget):
        open_contexts = [ctx for ctx in pool if ctx.name not in chosen]
        scores = {ctx.key: brute_force_acquisition(ctx, table, gp, beta, alpha, pool, floor) for ctx in open_contexts}
        best_key = max(sorted(scores), key=lambda key: scores[key])
        ctx = next(c for c in pool if c.key == best_key)
        model = trainer.train(ctx)
        table.update_value(model.model_id, trainer.evaluate_pool(model.model_id))
        gp = gp.with_observation(ctx.embed(), -model.training_loss)
        chosen.append(ctx.name)
    return chosen


class TestAcquisition(unittest.TestCase):

    def setUp(self):
        self.pool = enumerate_contexts()
        self.gap = GapModel(0.05)

    def test_matches_direct_formula(self):
        trainer = LandscapeTrainer(self.pool)
        table = PerformanceTable(self.pool)
        observations = []
        for ctx in (self.pool[3], self.pool[10]):
            model = trainer.train(ctx)
            table.update_value(model.model_id, trainer.evaluate_pool(model.model_id))
            observations.append((ctx.embed(), -model.training_loss))
        gp = fit_gp(GpConfig(), observations)
        for candidate in self.pool:
            with self.subTest(candidate=candidate.name):
                self.assertAlmostEqual(
                    acquisition(candidate, table, gp, 2.0, self.gap, self.pool),
                    brute_force_acquisition(candidate, table, gp, 2.0, 0.05, self.pool, -1e3),
                    places=12,
                )

    def test_first_pick_is_most_central(self):
        """Before any model exists the floor dominates and the gap decides."""
        table = PerformanceTable(self.pool)
        chosen, scores = select_next_context(self.pool, [], table, GpModel(), 1.0, self.gap)
        spread = {ctx.name: np.mean([ctx.point.distance(o.point) for o in self.pool]) for ctx in self.pool}
        self.assertAlmostEqual(spread[chosen.name], min(spread.values()), places=9)
        self.assertEqual(len(scores), 13)

    def test_negative_brackets_clip_to_zero(self):
        table = PerformanceTable(self.pool)
        table.update_value("perfect", [0.0] * len(self.pool))
        gp = GpModel(signal_variance=1e-4, prior_mean=-5.0)
        self.assertEqual(acquisition(self.pool[0], table, gp, 1.0, self.gap, self.pool), 0.0)

    def test_ties_go_to_lowest_key(self):
        """With zero gap and a flat GP every candidate scores the same."""
        table = PerformanceTable(self.pool)
        chosen, scores = select_next_context(self.pool, self.pool[:2], table, GpModel(), 1.0, GapModel(0.0))
        self.assertEqual(len(set(scores.values())), 1)
        self.assertEqual(chosen.key, self.pool[2].key)

    def test_exhausted_pool(self):
        with self.assertRaises(ValueError):
            select_next_context(self.pool, self.pool, PerformanceTable(self.pool), GpModel(), 1.0, self.gap)
        with self.assertRaises(ValueError):
            acquisition(self.pool[0], PerformanceTable(self.pool), GpModel(), 1.0, self.gap, [])


class TestContextualLearning(unittest.TestCase):

    def setUp(self):
        self.pool = enumerate_contexts()

    def run_budget(self, budget):
        trainer = LandscapeTrainer(self.pool)
        result = run_contextual_learning(self.pool, budget, trainer, GpConfig(), SelectionConfig(budget=3))
        return trainer, result

    def test_trains_distinct_contexts_within_budget(self):
        trainer, result = self.run_budget(5)
        self.assertEqual(len(trainer.calls), 5)
        self.assertEqual(len(set(trainer.calls)), 5)
        self.assertEqual(result.model_ids, trainer.calls)
        self.assertEqual(result.contexts, trainer.calls)
        self.assertEqual(len(result.table), 5)

    def test_aggregate_loss_never_increases(self):
        _, result = self.run_budget(13)
        V = [step.V_aggregate for step in result.trace]
        self.assertTrue(all(b <= a for a, b in zip(V, V[1:])))
        self.assertAlmostEqual(V[-1], float(np.mean([LandscapeTrainer(self.pool).base(c) for c in self.pool])))

    def test_each_pick_maximises_acquisition(self):
        _, result = self.run_budget(4)
        for step in result.trace:
            scores = step.acquisition_per_candidate
            self.assertEqual(scores[step.chosen_context], max(scores.values()))

    def test_matches_greedy_oracle(self):
        """Budget-3 selection agrees with the direct greedy loop on random loss landscapes."""
        rng = np.random.default_rng(8)
        for landscape in range(6):
            offsets = {ctx.key: float(rng.uniform(0.0, 0.5)) for ctx in self.pool}
            slope = float(rng.uniform(0.2, 1.0))
            beta, alpha = float(rng.uniform(0.5, 4.0)), float(rng.uniform(0.0, 0.1))
            with self.subTest(landscape=landscape):
                result = run_contextual_learning(
                    self.pool,
                    3,
                    LandscapeTrainer(self.pool, slope, offsets),
                    GpConfig(),
                    SelectionConfig(beta=beta, alpha=alpha),
                )
                expected = greedy_oracle(self.pool, LandscapeTrainer(self.pool, slope, offsets), 3, beta, alpha)
                self.assertEqual(result.contexts, expected)
                self.assertEqual(len(set(result.contexts)), 3)

    def test_greedy_is_deterministic(self):
        """A smaller budget picks a prefix of a larger one."""
        _, small = self.run_budget(3)
        _, large = self.run_budget(6)
        self.assertEqual(small.contexts, large.contexts[:3])

    def test_invalid_budget(self):
        for budget in (0, 14):
            with self.assertRaises(ValueError):
                run_contextual_learning(self.pool, budget, LandscapeTrainer(self.pool))

    def test_trace_round_trip(self):
        _, result = self.run_budget(2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "trace.json"
            write_trace(result.trace, path)
            again = read_trace(path)
        self.assertEqual([step.to_dict() for step in again], [step.to_dict() for step in result.trace])
        self.assertEqual(again[0].step, 1)
        self.assertEqual(again[0].training_loss_history_ref, f"{again[0].chosen_context}.json")


if __name__ == "__main__":
    unittest.main()
