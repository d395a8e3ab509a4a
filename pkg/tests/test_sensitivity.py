import unittest

import numpy as np

from ctxmhe.mhe import HorizonWindow, MheWeights, solve_mhe
from ctxmhe.models import ProcessModel
from ctxmhe.sensitivity import (
    NotConvergedError,
    build_sensitivity_bundle,
    finite_difference_sensitivity,
    gradcheck,
    kf_sensitivity,
    random_instance,
    solution_sensitivity,
    theta_names,
)


class TestSensitivity(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.window, self.weights = random_instance(self.rng, horizon=4)
        self.solution = solve_mhe(self.window, self.weights)

    def test_names(self):
        names = theta_names()
        self.assertEqual(len(names), 25)
        self.assertEqual(names[0], "P[0]")
        self.assertEqual(names[9], "R[0]")
        self.assertEqual(names[-1], "gamma")

    def test_bundle_shapes(self):
        bundle = build_sensitivity_bundle(self.window, self.weights, self.solution)
        self.assertEqual(bundle.steps, 4)
        self.assertEqual(len(bundle.S), 5)
        self.assertEqual(bundle.T[0].shape, (9, 25))
        self.assertEqual(bundle.prior_sensitivity.shape, (9, 25))
        # S is the negated measurement information
        self.assertTrue(np.all(np.linalg.eigvalsh(bundle.S[0]) <= 1e-12))

    def test_matches_finite_differences(self):
        """The recursion agrees with perturbing every weight and re-solving."""
        analytic = solution_sensitivity(self.window, self.weights, self.solution)
        numeric = finite_difference_sensitivity(self.window, self.weights, h=1e-5)
        self.assertEqual(analytic.shape, (5, 9, 25))
        scale = np.max(np.abs(numeric))
        np.testing.assert_allclose(analytic, numeric, atol=1e-3 * scale)

    def test_dual_sensitivity_vanishes_at_window_end(self):
        bundle = build_sensitivity_bundle(self.window, self.weights, self.solution)
        result = kf_sensitivity(bundle)
        np.testing.assert_array_equal(result.Lambda[-1], np.zeros((9, 25)))
        np.testing.assert_array_equal(result.X[-1], result.X_kf[-1])

    def test_scaling_direction_has_no_effect(self):
        """Scaling all diagonals together leaves the estimate unchanged."""
        sensitivity = solution_sensitivity(self.window, self.weights, self.solution)
        direction = self.weights.theta.copy()
        direction[-1] = 0.0
        np.testing.assert_allclose(sensitivity @ direction, 0.0, atol=1e-8)

    def test_not_converged_rejected(self):
        solution = solve_mhe(self.window, self.weights, max_iterations=1)
        with self.assertRaises(NotConvergedError):
            build_sensitivity_bundle(self.window, self.weights, solution)

    def test_gradcheck_rows(self):
        rows = gradcheck(instances=20, seed=0, horizon=10)
        self.assertEqual(len(rows), 25)
        self.assertEqual([row.name for row in rows], theta_names())
        self.assertLess(max(row.max_rel_error for row in rows), 1e-3)

    def test_gamma_near_one(self):
        """A one-sided stencil is used when gamma sits at its upper bound."""
        weights = MheWeights(self.weights.p_diag, self.weights.r_diag, self.weights.q_diag, 1.0)
        numeric = finite_difference_sensitivity(self.window, weights, h=1e-5)
        self.assertTrue(np.all(np.isfinite(numeric)))


class TestBundleCoefficients(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(17)

    def test_measurement_weight_columns(self):
        """Each R_base entry moves the measurement gradient through one column only."""
        window, weights = random_instance(self.rng, horizon=1)
        solution = solve_mhe(window, weights)
        bundle = build_sensitivity_bundle(window, weights, solution)
        H = window.model.H
        for k, y in enumerate(window.measurements):
            age = window.steps - k
            residual = y - H @ solution.states[k]
            T = bundle.T[k]
            np.testing.assert_array_equal(T[:, :9], 0.0)
            np.testing.assert_array_equal(T[:, 15:24], 0.0)
            for i in range(6):
                expected = H.T @ (weights.gamma**age * np.eye(6)[i] * residual)
                np.testing.assert_allclose(T[:, 9 + i], expected, rtol=1e-12, atol=1e-15)
                self.assertEqual(np.count_nonzero(T[:, 9 + i]), int(residual[i] != 0.0))

    def test_forgetting_column_matches_finite_differences(self):
        window, weights = random_instance(self.rng, horizon=6)
        solution = solve_mhe(window, weights)
        bundle = build_sensitivity_bundle(window, weights, solution)
        h = 1e-6
        upper = MheWeights(weights.p_diag, weights.r_diag, weights.q_diag, weights.gamma + h)
        lower = MheWeights(weights.p_diag, weights.r_diag, weights.q_diag, weights.gamma - h)
        for k in range(window.steps):
            age = window.steps - k
            w = solution.noises[k]
            numeric = (upper.q_stage(age) - lower.q_stage(age)) * w / (2 * h)
            expected = age * weights.gamma ** (age - 1) * weights.q_diag * w
            np.testing.assert_allclose(bundle.L_wtheta[k][:, -1], expected, rtol=1e-12)
            np.testing.assert_allclose(bundle.L_wtheta[k][:, -1], numeric, rtol=1e-6, atol=1e-12)


class LinearScalarModel(ProcessModel):
    """x+ = a x + b u + w, y = x."""

    n = 1
    ny = 1
    nu = 1

    def __init__(self, a: float, b: float):
        super().__init__(1.0)
        self.a, self.b = a, b

    def f(self, x, u, w):
        return self.a * x + self.b * u + w

    def jacobian_x(self, x, u, w):
        return np.array([[self.a]])

    def h(self, x):
        return x

    def jacobian_h(self, x):
        return np.eye(1)


def scalar_closed_form(a, c, prior, y0, y1, p, r, q, gamma):
    """Minimiser of the one-step scalar problem and its derivative in (p, r, q, gamma), expanded by hand.

    With z = (x0, w0) and x1 = a x0 + c + w0 the normal equations are M z = b with
    M = [[p + gamma r + r a^2, r a], [r a, r + gamma q]] and
    b = [p prior + gamma r y0 + r a (y1 - c), r (y1 - c)].
    """
    M = np.array([[p + gamma * r + r * a * a, r * a], [r * a, r + gamma * q]])
    b = np.array([p * prior + gamma * r * y0 + r * a * (y1 - c), r * (y1 - c)])
    z = np.linalg.solve(M, b)
    dM = {
        "p": np.array([[1.0, 0.0], [0.0, 0.0]]),
        "r": np.array([[gamma + a * a, a], [a, 1.0]]),
        "q": np.array([[0.0, 0.0], [0.0, gamma]]),
        "gamma": np.array([[r, 0.0], [0.0, q]]),
    }
    db = {
        "p": np.array([prior, 0.0]),
        "r": np.array([gamma * y0 + a * (y1 - c), y1 - c]),
        "q": np.zeros(2),
        "gamma": np.array([r * y0, 0.0]),
    }
    columns = []
    for name in ("p", "r", "q", "gamma"):
        dz = np.linalg.solve(M, db[name] - dM[name] @ z)
        columns.append([dz[0], a * dz[0] + dz[1]])
    states = np.array([z[0], a * z[0] + c + z[1]])
    return states, np.array(columns).T


class TestScalarSensitivity(unittest.TestCase):

    def test_matches_closed_form(self):
        rng = np.random.default_rng(4)
        for instance in range(10):
            a, b = rng.uniform(0.5, 1.5), rng.uniform(-1.0, 1.0)
            u, prior, y0, y1 = rng.normal(size=4)
            p, r, q = rng.uniform(0.5, 5.0, 3)
            gamma = rng.uniform(0.5, 1.0)
            model = LinearScalarModel(a, b)
            window = HorizonWindow(([y0], [y1]), ([u],), [prior], 1, model)
            weights = MheWeights([p], [r], [q], gamma)
            solution = solve_mhe(window, weights)
            states, expected = scalar_closed_form(a, b * u, prior, y0, y1, p, r, q, gamma)
            with self.subTest(instance=instance):
                np.testing.assert_allclose(solution.states[:, 0], states, rtol=1e-10, atol=1e-12)
                analytic = solution_sensitivity(window, weights, solution)
                self.assertEqual(analytic.shape, (2, 1, 4))
                np.testing.assert_allclose(analytic[:, 0, :], expected, rtol=1e-8, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
