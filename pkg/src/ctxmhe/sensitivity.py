from dataclasses import dataclass
from typing import Optional
import logging

import numpy as np
from numpy.typing import NDArray

from .mhe import GAMMA_MIN, HorizonWindow, MheSolution, MheWeights, solve_mhe
from .models import TranslationalModel

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12


class IllConditionedRecursionError(ArithmeticError):
    """(I - P_k S_k) is too ill-conditioned to invert at a window step."""

    def __init__(self, step: int, condition: float):
        super().__init__(f"(I - P S) at step {step} has condition number {condition:.3e}")
        self.step = step
        self.condition = condition


class NotConvergedError(ValueError):
    """Sensitivities are only defined at a converged MHE solution."""


def theta_names(n: int = 9, ny: int = 6) -> list[str]:
    return (
        [f"P[{i}]" for i in range(n)]
        + [f"R[{i}]" for i in range(ny)]
        + [f"Q[{i}]" for i in range(n)]
        + ["gamma"]
    )


@dataclass(frozen=True)
class SensitivityBundle:
    """Coefficients of the linearised optimality conditions of one MHE window.

    Sign convention: ``S`` and ``T`` are the negated second derivatives of the
    measurement terms, S_k = -H_k^T R_k H_k and T_k = -d/dtheta of the
    measurement gradient, so that (I - P_k S_k) is always invertible.

    Attributes:
        F_bar: Dynamics Jacobians df/dx at the solution, one per step.
        G: Noise Jacobians df/dw, one per step.
        S: Negated measurement information, one per stage.
        T: Mixed measurement derivatives (n x p), one per stage.
        L_ww: Second derivative of the process cost in w (= Q_k), one per step.
        L_wtheta: Mixed process derivatives (n x p), one per step.
        prior_sensitivity: Sensitivity of the arrival term's minimiser,
            -P^-1 (dP/dtheta)(x_{t-N} - prior), n x p.
        arrival_weight: The arrival weight P.
    """

    F_bar: tuple
    G: tuple
    S: tuple
    T: tuple
    L_ww: tuple
    L_wtheta: tuple
    prior_sensitivity: NDArray
    arrival_weight: NDArray

    @property
    def steps(self) -> int:
        return len(self.F_bar)


@dataclass(frozen=True)
class SensitivitySolution:
    """Result of the Kalman-filter sensitivity recursion.

    Attributes:
        X: d x_{k|t} / d theta for every stage (n x p each).
        X_kf: Filtered sensitivities X^KF_{k|k}.
        C: Correction matrices C_k.
        P: Predicted covariances P_k.
        Lambda: Dual sensitivities; the last one is zero.
    """

    X: tuple
    X_kf: tuple
    C: tuple
    P: tuple
    Lambda: tuple

    def as_array(self) -> NDArray:
        return np.stack(self.X)


def build_sensitivity_bundle(
    window: HorizonWindow, weights: MheWeights, sol: MheSolution
) -> SensitivityBundle:
    """Linearises the optimality conditions of the MHE problem at a solution."""
    if not sol.converged:
        raise NotConvergedError("sensitivity bundle requested for a non-converged MHE solution")
    model = window.model
    n, ny, p = weights.n, weights.ny, weights.size
    steps = window.steps
    gamma = weights.gamma
    r_cols = slice(n, n + ny)
    q_cols = slice(n + ny, 2 * n + ny)

    S, T = [], []
    for k, y in enumerate(window.measurements):
        x = sol.states[k]
        H = model.jacobian_h(x)
        residual = y - model.h(x)
        age = steps - k
        S.append(-H.T @ np.diag(weights.r_stage(age)) @ H)
        t = np.zeros((n, p))
        t[:, r_cols] = H.T * (gamma**age * residual)[None, :]
        if age > 0:
            t[:, -1] = age * gamma ** (age - 1) * (H.T @ (weights.r_diag * residual))
        T.append(t)

    F_bar, G, L_ww, L_wtheta = [], [], [], []
    for k in range(steps):
        x, u, w = sol.states[k], window.controls[k], sol.noises[k]
        age = steps - k
        F_bar.append(model.jacobian_x(x, u, w))
        G.append(model.jacobian_w(x, u, w))
        L_ww.append(np.diag(weights.q_stage(age)))
        mixed = np.zeros((n, p))
        mixed[:, q_cols] = np.diag(gamma**age * w)
        mixed[:, -1] = age * gamma ** (age - 1) * weights.q_diag * w
        L_wtheta.append(mixed)

    prior_sensitivity = np.zeros((n, p))
    offset = sol.states[0] - window.prior
    prior_sensitivity[:, :n] = np.diag(-offset / weights.p_diag)

    return SensitivityBundle(
        F_bar=tuple(F_bar),
        G=tuple(G),
        S=tuple(S),
        T=tuple(T),
        L_ww=tuple(L_ww),
        L_wtheta=tuple(L_wtheta),
        prior_sensitivity=prior_sensitivity,
        arrival_weight=weights.P,
    )


def _correction(P_k: NDArray, S_k: NDArray, step: int) -> NDArray:
    system = np.eye(len(P_k)) - P_k @ S_k
    condition = np.linalg.cond(system)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise IllConditionedRecursionError(step, condition)
    return np.linalg.solve(system, P_k)


def kf_sensitivity(
    bundle: SensitivityBundle,
    weights: Optional[MheWeights] = None,
    window: Optional[HorizonWindow] = None,
    sol: Optional[MheSolution] = None,
) -> SensitivitySolution:
    """Computes d x_{k|t} / d theta with a forward Kalman filter and a backward dual pass.

    The forward pass starts from P_{t-N} = P^-1 and the arrival-term
    sensitivity, predicts with F-bar and the process-term sensitivity, and
    corrects with S and T. The backward pass propagates the dual
    sensitivities from Lambda_t = 0 and the smoothed sensitivities are
    X_{k|t} = X^KF_{k|k} + C_k F-bar_k^T Lambda_k.

    Args:
        bundle: Coefficients from :func:`build_sensitivity_bundle`.
        weights, window, sol: Accepted for call-site symmetry; everything the
            recursion needs is in the bundle.

    Raises:
        IllConditionedRecursionError: If (I - P_k S_k) cannot be inverted reliably.
    """
    steps = bundle.steps
    n = bundle.arrival_weight.shape[0]
    eye = np.eye(n)

    P_k = np.linalg.inv(bundle.arrival_weight)
    C_k = _correction(P_k, bundle.S[0], 0)
    X_kf = [(eye + C_k @ bundle.S[0]) @ bundle.prior_sensitivity + C_k @ bundle.T[0]]
    Ps, Cs = [P_k], [C_k]

    for k in range(1, steps + 1):
        F, G = bundle.F_bar[k - 1], bundle.G[k - 1]
        L_ww = bundle.L_ww[k - 1]
        noise_mean = np.linalg.solve(L_ww, bundle.L_wtheta[k - 1])
        predicted = F @ X_kf[-1] - G @ noise_mean
        P_k = F @ Cs[-1] @ F.T + G @ np.linalg.solve(L_ww, G.T)
        C_k = _correction(P_k, bundle.S[k], k)
        X_kf.append((eye + C_k @ bundle.S[k]) @ predicted + C_k @ bundle.T[k])
        Ps.append(P_k)
        Cs.append(C_k)

    p = bundle.prior_sensitivity.shape[1]
    Lambda = [np.zeros((n, p)) for _ in range(steps + 1)]
    for k in range(steps, 0, -1):
        S_k = bundle.S[k]
        carried = bundle.F_bar[k].T @ Lambda[k] if k < steps else np.zeros((n, p))
        Lambda[k - 1] = (eye + S_k @ Cs[k]) @ carried + S_k @ X_kf[k] + bundle.T[k]

    X = [X_kf[k] + Cs[k] @ bundle.F_bar[k].T @ Lambda[k] for k in range(steps)]
    X.append(X_kf[steps])
    return SensitivitySolution(
        X=tuple(X), X_kf=tuple(X_kf), C=tuple(Cs), P=tuple(Ps), Lambda=tuple(Lambda)
    )


def solution_sensitivity(window: HorizonWindow, weights: MheWeights, sol: MheSolution) -> NDArray:
    """d x_hat / d theta for every stage of a window, shape (steps + 1, n, p)."""
    bundle = build_sensitivity_bundle(window, weights, sol)
    return kf_sensitivity(bundle, weights, window, sol).as_array()


def finite_difference_sensitivity(
    window: HorizonWindow, weights: MheWeights, h: float = 1e-5, **solver_kwargs
) -> NDArray:
    """Central finite differences of the MHE states in every theta component.

    Components whose central stencil would leave the admissible range (gamma
    near one) use a second-order one-sided stencil instead.
    """
    theta = weights.theta
    n, ny = weights.n, weights.ny

    def states(values):
        return solve_mhe(window, MheWeights.from_theta(values, n, ny), **solver_kwargs).states

    columns = []
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = h
        if i == len(theta) - 1 and theta[i] + h > 1.0:
            column = (3.0 * states(theta) - 4.0 * states(theta - step) + states(theta - 2 * step)) / (2 * h)
        elif i == len(theta) - 1 and theta[i] - h <= GAMMA_MIN:
            column = (-3.0 * states(theta) + 4.0 * states(theta + step) - states(theta + 2 * step)) / (2 * h)
        else:
            column = (states(theta + step) - states(theta - step)) / (2 * h)
        columns.append(column)
    return np.stack(columns, axis=-1)


@dataclass(frozen=True)
class GradcheckRow:
    component: int
    name: str
    max_abs_error: float
    max_rel_error: float


def compare_sensitivities(analytic: NDArray, numeric: NDArray, names: list[str]) -> list[GradcheckRow]:
    """Per-component error between two (steps + 1, n, p) sensitivity arrays."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    rows = []
    for i, name in enumerate(names):
        difference = np.max(np.abs(analytic[..., i] - numeric[..., i]))
        denominator = max(float(np.max(np.abs(numeric[..., i]))), 1e-6 * scale, 1e-12)
        rows.append(GradcheckRow(i, name, float(difference), float(difference / denominator)))
    return rows


def random_instance(
    rng: np.random.Generator,
    horizon: int = 10,
    dt: float = 0.02,
    mass: float = 0.033,
    gravity: float = 9.81,
    measurement_std: float = 1e-2,
) -> tuple[HorizonWindow, MheWeights]:
    """A random full translational window with random admissible weights."""
    model = TranslationalModel(mass, gravity, dt)
    x = np.concatenate([rng.normal(0.0, 0.5, 3), rng.normal(0.0, 0.3, 3), rng.normal(0.0, 0.05, 3)])
    measurements, controls = [model.h(x) + measurement_std * rng.standard_normal(6)], []
    for _ in range(horizon):
        u = gravity * np.array([0.0, 0.0, 1.0]) + rng.normal(0.0, 0.5, 3)
        x = model.f(x, u, np.concatenate([rng.normal(0.0, 1e-3, 6), rng.normal(0.0, 5e-3, 3)]))
        controls.append(u)
        measurements.append(model.h(x) + measurement_std * rng.standard_normal(6))
    prior = rng.normal(0.0, 0.1, 9)
    prior[:3] += measurements[0][:3]
    window = HorizonWindow(tuple(measurements), tuple(controls), prior, horizon, model)
    weights = MheWeights(
        p_diag=rng.uniform(0.5, 5.0, 9),
        r_diag=rng.uniform(0.5, 5.0, 6),
        q_diag=rng.uniform(0.5, 5.0, 9),
        gamma=rng.uniform(0.8, 0.99),
    )
    return window, weights


def gradcheck(instances: int = 20, seed: int = 0, horizon: int = 10, h: float = 1e-5) -> list[GradcheckRow]:
    """Worst-case analytic-vs-finite-difference error per theta component over random windows."""
    rng = np.random.default_rng(seed)
    names = theta_names()
    worst = {i: GradcheckRow(i, name, 0.0, 0.0) for i, name in enumerate(names)}
    for index in range(instances):
        window, weights = random_instance(rng, horizon)
        solution = solve_mhe(window, weights)
        analytic = solution_sensitivity(window, weights, solution)
        numeric = finite_difference_sensitivity(window, weights, h)
        for row in compare_sensitivities(analytic, numeric, names):
            if row.max_rel_error >= worst[row.component].max_rel_error:
                worst[row.component] = row
        logger.debug("gradcheck instance %d done", index)
    return [worst[i] for i in range(len(names))]
