import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from ctxmhe.dynamics import (
    E3,
    Disturbance,
    QuadParams,
    RigidBodyState,
    hat,
    measure,
    motor_mixing_matrix,
    project_to_so3,
    so3_exp,
    step_dynamics,
    vee,
)

vectors = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


class TestSo3(unittest.TestCase):

    def test_hat_is_cross_product(self):
        """hat(a) @ b equals a x b and vee inverts hat."""
        a, b = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.5, -0.7])
        np.testing.assert_allclose(hat(a) @ b, np.cross(a, b))
        np.testing.assert_allclose(vee(hat(a)), a)

    @given(vectors)
    @settings(max_examples=50, deadline=None)
    def test_exponential_is_rotation(self, phi):
        """The exponential map lands on SO(3)."""
        R = so3_exp(phi)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        self.assertAlmostEqual(np.linalg.det(R), 1.0, places=9)

    def test_projection_restores_orthonormality(self):
        """A perturbed rotation is pulled back onto SO(3)."""
        R = so3_exp(np.array([0.2, 0.1, -0.4])) + 1e-4 * np.ones((3, 3))
        projected = project_to_so3(R)
        np.testing.assert_allclose(projected.T @ projected, np.eye(3), atol=1e-12)


class TestStepDynamics(unittest.TestCase):

    def setUp(self):
        self.params = QuadParams()
        self.dt = 0.02

    def test_hover_is_equilibrium(self):
        """Equal rotor thrusts summing to mg keep a level vehicle at rest."""
        state = RigidBodyState.at_rest([0.1, -0.2, 0.5])
        thrusts = np.full(4, self.params.hover_thrust / 4.0)
        after = step_dynamics(state, thrusts, Disturbance.zero(), self.params, self.dt)
        np.testing.assert_allclose(after.p, state.p, atol=1e-12)
        np.testing.assert_allclose(after.v, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(after.Omega, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(after.R, np.eye(3), atol=1e-12)

    def test_free_fall(self):
        """Without thrust the vehicle falls with g; RK4 is exact for constant acceleration."""
        state = RigidBodyState.at_rest([0.0, 0.0, 1.0])
        after = step_dynamics(state, np.zeros(4), Disturbance.zero(), self.params, self.dt)
        g = self.params.gravity
        np.testing.assert_allclose(after.v, -g * self.dt * E3, atol=1e-12)
        np.testing.assert_allclose(after.p, [0.0, 0.0, 1.0 - 0.5 * g * self.dt**2], atol=1e-12)

    def test_wind_force_accelerates(self):
        """A constant horizontal wind force accelerates a hovering vehicle by F/m."""
        state = RigidBodyState.at_rest([0.0, 0.0, 0.5])
        thrusts = np.full(4, self.params.hover_thrust / 4.0)
        wind = Disturbance(force=[0.05, 0.0, 0.0])
        after = step_dynamics(state, thrusts, wind, self.params, self.dt)
        np.testing.assert_allclose(after.v, [0.05 / self.params.mass * self.dt, 0.0, 0.0], atol=1e-12)

    def test_rotation_stays_orthonormal(self):
        """Unequal thrusts spin the body while R stays on SO(3)."""
        state = RigidBodyState.at_rest([0.0, 0.0, 0.5])
        thrusts = np.array([0.09, 0.07, 0.08, 0.085])
        for _ in range(50):
            state = step_dynamics(state, thrusts, Disturbance.zero(), self.params, self.dt)
        np.testing.assert_allclose(state.R.T @ state.R, np.eye(3), atol=1e-9)

    def test_invalid_inputs(self):
        """Bad dt, negative thrusts and non-finite values are rejected."""
        state = RigidBodyState.at_rest(np.zeros(3))
        with self.assertRaises(ValueError):
            step_dynamics(state, np.zeros(4), Disturbance.zero(), self.params, 0.0)
        with self.assertRaises(ValueError):
            step_dynamics(state, np.zeros(4), Disturbance.zero(), self.params, 0.2)
        with self.assertRaises(ValueError):
            step_dynamics(state, np.array([0.1, -0.1, 0.1, 0.1]), Disturbance.zero(), self.params, self.dt)
        with self.assertRaises(ValueError):
            RigidBodyState(p=[np.nan, 0.0, 0.0])
        with self.assertRaises(ValueError):
            RigidBodyState(R=2.0 * np.eye(3))

    def test_mixing_matrix_invertible(self):
        """The default geometry has an invertible mixing map whose first row sums the rotors."""
        M = motor_mixing_matrix(self.params)
        self.assertGreater(abs(np.linalg.det(M)), 0.0)
        np.testing.assert_allclose(M[0], np.ones(4))


class TestMeasure(unittest.TestCase):

    def test_same_seed_same_measurement(self):
        """Measurements are reproducible from their seed."""
        state = RigidBodyState(p=[0.1, 0.2, 0.3], v=[0.0, 0.1, 0.0])
        std = np.full(6, 0.01)
        a = measure(state, std, 42)
        b = measure(state, std, 42)
        c = measure(state, std, 43)
        np.testing.assert_array_equal(a.y, b.y)
        self.assertFalse(np.array_equal(a.y, c.y))

    def test_noise_free_measurement_is_truth(self):
        """Zero noise returns (p, v) exactly."""
        state = RigidBodyState(p=[0.1, 0.2, 0.3], v=[0.0, 0.1, 0.0])
        y = measure(state, np.zeros(6), 0)
        np.testing.assert_array_equal(y.position, state.p)
        np.testing.assert_array_equal(y.velocity, state.v)

    def test_noise_has_requested_spread(self):
        state = RigidBodyState(p=[0.1, 0.2, 0.3], v=[0.0, 0.1, 0.0])
        truth = np.concatenate([state.p, state.v])
        errors = np.array([measure(state, np.full(6, 0.01), seed).y - truth for seed in range(100_000)])
        np.testing.assert_allclose(errors.std(axis=0), 0.01, rtol=0.02)

    def test_negative_noise_rejected(self):
        with self.assertRaises(ValueError):
            measure(RigidBodyState(), -np.ones(6), 0)


if __name__ == "__main__":
    unittest.main()
