import unittest

import numpy as np

from ctxmhe.dynamics import Measurement
from ctxmhe.ekf import EkfNoise
from ctxmhe.estimator import EkfEstimator, MheEstimator
from ctxmhe.mhe import MheWeights
from ctxmhe.models import TranslationalModel


class TestMheEstimator(unittest.TestCase):

    def setUp(self):
        self.model = TranslationalModel(0.033, 9.81, 0.02)
        self.prior = np.array([0.1, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        self.estimator = MheEstimator(self.model, self.prior, horizon=4)
        self.weights = MheWeights(np.ones(9), np.full(6, 10.0), np.full(9, 5.0), 0.95)
        self.u = np.array([0.0, 0.0, 9.81])

    def feed(self, steps):
        for k in range(steps):
            y = Measurement(np.concatenate([self.prior[:3], np.zeros(3)]), timestamp=0.02 * k)
            control = None if self.estimator.window is None else self.u
            self.estimator.step(y, control, self.weights)

    def test_window_grows_to_horizon(self):
        self.feed(3)
        self.assertEqual(self.estimator.window.steps, 2)
        self.feed(5)
        self.assertEqual(self.estimator.window.steps, 4)

    def test_latest_before_and_after(self):
        """Before any measurement the latest estimate is the prior."""
        np.testing.assert_array_equal(self.estimator.latest().state, self.prior)
        self.feed(2)
        estimate = self.estimator.latest()
        self.assertIsNotNone(estimate.solution)
        np.testing.assert_array_equal(estimate.state, estimate.solution.terminal)
        np.testing.assert_array_equal(estimate.disturbance.force, estimate.state[6:9])

    def test_context_manager_resets(self):
        with self.estimator as estimator:
            self.feed(3)
            self.assertIsNotNone(estimator.window)
        self.assertIsNone(self.estimator.window)
        np.testing.assert_array_equal(self.estimator.latest().state, self.prior)

    def test_control_required_after_start(self):
        self.feed(1)
        with self.assertRaises(ValueError):
            self.estimator.step(Measurement(np.zeros(6)), None, self.weights)

    def test_innovation_features(self):
        """Position innovation against the one-step prediction, then the velocity estimate."""
        y = Measurement(np.array([0.15, 0.2, 0.0, 1.0, 0.0, 0.0]))
        features = self.estimator.features(y)
        np.testing.assert_allclose(features, [0.05, 0.0, 0.0, 0.0, 0.0, 0.0])
        raw = MheEstimator(self.model, self.prior, features_mode="raw").features(y)
        np.testing.assert_array_equal(raw, y.y)

    def test_unknown_feature_mode(self):
        with self.assertRaises(ValueError):
            MheEstimator(self.model, self.prior, features_mode="spectral")


class TestEkfEstimator(unittest.TestCase):

    def test_steps_and_resets(self):
        model = TranslationalModel(0.033, 9.81, 0.02)
        noise = EkfNoise.from_std(np.full(9, 1e-2), np.full(6, 1e-2))
        estimator = EkfEstimator(model, np.zeros(9), np.eye(9), noise)
        first = estimator.step(Measurement(np.full(6, 0.1)), None)
        self.assertGreater(first.state[0], 0.0)
        estimator.step(Measurement(np.full(6, 0.1)), np.array([0.0, 0.0, 9.81]))
        with self.assertRaises(ValueError):
            estimator.step(Measurement(np.zeros(6)), None)
        estimator.reset()
        np.testing.assert_array_equal(estimator.latest().state, np.zeros(9))


if __name__ == "__main__":
    unittest.main()
