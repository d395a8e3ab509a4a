from dataclasses import dataclass, field
from typing import Callable, Optional
import logging
import math

import numpy as np
from numpy.typing import NDArray

from .config import TrainConfig
from .mhe import HorizonWindow, MheSolution, MheWeights, solve_mhe
from .network import Adam, WeightNet
from .sensitivity import IllConditionedRecursionError, solution_sensitivity
from .simulation import ClosedLoop, SimStack, stream_seed
from .trajectory import Trajectory
from .wind import WindContext

logger = logging.getLogger(__name__)

PASS_STREAM = 10


def _states(solution) -> NDArray:
    return solution.states if isinstance(solution, MheSolution) else np.asarray(solution, dtype=float)


def tracking_loss(solution, reference, W: NDArray, squared: bool = False) -> float:
    """Weighted tracking error of an estimated window against a reference.

    L = sum_k ||x_k - x_ref_k||_W with ||e||_W = sqrt(e^T W e), or the sum of
    e^T W e when ``squared``.

    Args:
        solution: An :class:`MheSolution` or a (steps + 1, n) array of states.
        reference: Reference states of the same shape.
        W: Positive semi-definite weight over the state components.
    """
    states = _states(solution)
    reference = np.asarray(reference, dtype=float)
    if states.shape != reference.shape:
        raise ValueError(f"solution has shape {states.shape}, reference {reference.shape}")
    errors = states - reference
    quadratic = np.einsum("ki,ij,kj->k", errors, W, errors)
    if squared:
        return float(np.sum(quadratic))
    return float(np.sum(np.sqrt(np.maximum(quadratic, 0.0))))


def tracking_loss_gradient(solution, reference, W: NDArray, squared: bool = False) -> NDArray:
    """d L / d x_k for every stage; stages with zero error get the zero subgradient."""
    errors = _states(solution) - np.asarray(reference, dtype=float)
    weighted = errors @ W.T
    if squared:
        return 2.0 * weighted
    norms = np.sqrt(np.maximum(np.einsum("ki,ki->k", errors, weighted), 0.0))
    gradient = np.zeros_like(errors)
    positive = norms > 0.0
    gradient[positive] = weighted[positive] / norms[positive, None]
    return gradient


def theta_gradient(
    window: HorizonWindow,
    weights: MheWeights,
    solution: MheSolution,
    reference: NDArray,
    W: NDArray,
    squared: bool = False,
) -> tuple[float, NDArray]:
    """Loss of one window and its gradient in the MHE weights, dL/dtheta = sum_k (dL/dx_k) dx_k/dtheta."""
    loss = tracking_loss(solution, reference, W, squared)
    sensitivity = solution_sensitivity(window, weights, solution)
    gradient = tracking_loss_gradient(solution, reference, W, squared)
    return loss, np.einsum("kn,knp->p", gradient, sensitivity)


@dataclass(frozen=True)
class StepSample:
    """What one closed-loop step fed into the estimator, kept for replay."""

    features: NDArray
    window: HorizonWindow
    reference: NDArray


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one episode.

    Attributes:
        loss: Mean per-step tracking loss.
        step_losses: Loss of every step.
        skipped_updates: Steps whose update was skipped (non-converged MHE or
            ill-conditioned sensitivities).
        duration: Simulated flight time in s.
    """

    loss: float
    step_losses: tuple
    skipped_updates: int = 0
    duration: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def _reference(loop: ClosedLoop, mode: str) -> NDArray:
    if mode == "setpoint":
        ref = loop.setpoint()
        return np.concatenate([ref.x_d, ref.v_d, np.zeros(3)])
    return loop.truth(with_disturbance=mode == "truth_with_disturbance")


def fly(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    seed: int,
    optimizer: Optional[Adam] = None,
    steps: Optional[int] = None,
    recorder: Optional[Callable[[StepSample], None]] = None,
) -> EpisodeResult:
    """One closed-loop pass through a context, updating the network when an optimizer is given.

    Every step: features, forward pass, MHE solve, loss against the reference
    window, optionally the chained gradient and one Adam update, then the
    disturbance-aware controller advances the plant.
    """
    steps = steps if steps is not None else cfg.episode_steps
    loop = ClosedLoop(stack, ctx, trajectory, seed)
    estimator = stack.mhe_estimator(trajectory.start, cfg.features)
    W = cfg.W
    references, losses = [], []
    skipped = 0
    control = None

    for _ in range(steps):
        measurement = loop.measure()
        references.append(_reference(loop, cfg.loss_reference))
        features = estimator.features(measurement)
        cache = net.forward_cached(features)
        weights = net.mapping.weights(cache.raw)
        window = estimator.next_window(measurement, control)
        solution = solve_mhe(window, weights, stack.estimator.max_iterations, stack.estimator.tolerance)
        estimator.commit(window, solution)
        reference = np.array(references[-(window.steps + 1) :])
        if recorder is not None:
            recorder(StepSample(features=cache.inputs[0], window=window, reference=reference))

        if optimizer is None:
            losses.append(tracking_loss(solution, reference, W, cfg.squared_norm))
        elif not solution.converged:
            losses.append(tracking_loss(solution, reference, W, cfg.squared_norm))
            skipped += 1
        else:
            try:
                loss, grad_theta = theta_gradient(window, weights, solution, reference, W, cfg.squared_norm)
            except IllConditionedRecursionError as error:
                logger.warning("skipping update at t=%.2f: %s", loop.time, error)
                losses.append(tracking_loss(solution, reference, W, cfg.squared_norm))
                skipped += 1
            else:
                losses.append(loss)
                gradient = net.backward(cache, grad_theta)
                net.set_parameters(optimizer.step(net.parameters(), gradient))

        estimate = estimator.latest()
        control = loop.act(estimate.state, estimate.disturbance)

    if skipped:
        logger.warning("%d of %d updates skipped in %s", skipped, steps, ctx.name)
    return EpisodeResult(
        loss=float(np.mean(losses)),
        step_losses=tuple(losses),
        skipped_updates=skipped,
        duration=steps * stack.dt,
    )


def pass_seeds(seed: int, count: int) -> list[int]:
    return [stream_seed(seed, PASS_STREAM, i) for i in range(count)]


def train_episode(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    optimizer: Adam,
    seeds: list[int],
) -> tuple[WeightNet, EpisodeResult]:
    """Trains the network in place for one episode, one seeded pass per seed."""
    results = [fly(net, ctx, cfg, stack, trajectory, pass_seed, optimizer) for pass_seed in seeds]
    merged = EpisodeResult(
        loss=float(np.mean([r.loss for r in results])),
        step_losses=tuple(loss for r in results for loss in r.step_losses),
        skipped_updates=sum(r.skipped_updates for r in results),
        duration=sum(r.duration for r in results),
    )
    return net, merged


def evaluate_loss(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    seeds: list[int],
) -> float:
    """Mean episode loss of a frozen network over seeded passes."""
    return float(np.mean([fly(net, ctx, cfg, stack, trajectory, seed).loss for seed in seeds]))


@dataclass
class TrainResult:
    """A trained network with its training history.

    Attributes:
        net: The network, holding the last accepted parameters.
        context: Context trained in.
        loss_history: Frozen-network loss of the parameters accepted after every episode.
        timestamps: Cumulative simulated time at the end of every episode (s).
        converged: Whether the convergence rule fired before ``max_episodes``.
        skipped_updates: Updates skipped over all episodes.
        seed: Seed of the run.
        initial_loss: Frozen-network loss before training.
    """

    net: WeightNet
    context: WindContext
    loss_history: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    converged: bool = False
    skipped_updates: int = 0
    seed: int = 0
    initial_loss: float = math.nan

    @property
    def episodes(self) -> int:
        return len(self.loss_history)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]

    @property
    def best_loss(self) -> float:
        return min(self.loss_history)

    def metadata(self) -> dict:
        return {
            "context": self.context.name,
            "seed": self.seed,
            "initial_loss": None if math.isnan(self.initial_loss) else self.initial_loss,
            "loss_history": list(self.loss_history),
            "timestamps": list(self.timestamps),
            "converged": self.converged,
            "skipped_updates": self.skipped_updates,
        }


def accept_episode(
    net: WeightNet,
    previous: NDArray,
    previous_loss: float,
    evaluate: Callable[[WeightNet], float],
    backtracks: int,
) -> float:
    """Keeps the episode's parameter change only if it lowers the frozen loss.

    The change is halved up to ``backtracks`` times until the loss on the
    episode's seeds drops below ``previous_loss``; otherwise the previous
    parameters are restored.

    Returns:
        The frozen loss of the parameters left in ``net``.
    """
    step = net.parameters() - previous
    fraction = 1.0
    for attempt in range(backtracks + 1):
        loss = evaluate(net)
        if loss < previous_loss:
            if attempt:
                logger.debug("accepted %.4g of the episode update (loss %.6f)", fraction, loss)
            return loss
        fraction *= 0.5
        net.set_parameters(previous + fraction * step)
    net.set_parameters(previous)
    logger.debug("no fraction of the episode update lowered the loss %.6f", previous_loss)
    return previous_loss


def train_to_convergence(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    seed: Optional[int] = None,
) -> TrainResult:
    """Repeats :func:`train_episode` until successive episode losses differ by less than the threshold.

    Every episode flies the same seeded passes, so episode losses differ only
    through the parameters. After the per-step Adam updates of an episode the
    frozen network is scored on those passes and the update is kept, shortened
    or undone by :func:`accept_episode`; the recorded history therefore never
    increases. An infinite threshold stops after the first episode and keeps
    its update as flown.
    """
    seed = cfg.seed if seed is None else seed
    seeds = pass_seeds(seed, cfg.samples_per_episode)
    optimizer = Adam(net.parameter_count, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(net=net, context=ctx, seed=seed)
    elapsed = 0.0

    def score(candidate: WeightNet) -> float:
        return evaluate_loss(candidate, ctx, cfg, stack, trajectory, seeds)

    if math.isinf(cfg.threshold):
        _, outcome = train_episode(net, ctx, cfg, stack, trajectory, optimizer, seeds)
        result.loss_history.append(outcome.loss)
        result.timestamps.append(outcome.duration)
        result.skipped_updates = outcome.skipped_updates
        result.converged = True
        logger.info("%s: single episode, loss %.6f", ctx.name, outcome.loss)
        return result

    accepted = result.initial_loss = score(net)
    for episode in range(cfg.max_episodes):
        previous = net.parameters()
        _, outcome = train_episode(net, ctx, cfg, stack, trajectory, optimizer, seeds)
        elapsed += outcome.duration
        result.skipped_updates += outcome.skipped_updates
        loss = accept_episode(net, previous, accepted, score, cfg.backtracks)
        result.loss_history.append(loss)
        result.timestamps.append(elapsed)
        logger.info("%s episode %d: loss %.6f (online %.6f)", ctx.name, episode, loss, outcome.loss)
        if abs(loss - accepted) < cfg.threshold:
            result.converged = True
            break
        accepted = loss

    if not result.converged:
        logger.warning("training in %s stopped after %d episodes without converging", ctx.name, result.episodes)
    return result


@dataclass(frozen=True)
class ParameterCheck:
    index: int
    analytic: float
    numeric: float
    rel_error: float


def record_samples(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    seed: int,
    steps: int,
) -> list[StepSample]:
    """Flies a short frozen-network episode and keeps every step's features and window."""
    samples = []
    fly(net, ctx, cfg, stack, trajectory, seed, steps=steps, recorder=samples.append)
    return samples


def replay_loss(net: WeightNet, samples: list[StepSample], cfg: TrainConfig, stack: SimStack) -> float:
    """Summed loss of recorded windows re-solved with the weights the network now emits."""
    total = 0.0
    for sample in samples:
        weights = net(sample.features)
        solution = solve_mhe(sample.window, weights, stack.estimator.max_iterations, stack.estimator.tolerance)
        total += tracking_loss(solution, sample.reference, cfg.W, cfg.squared_norm)
    return total


def replay_gradient(net: WeightNet, samples: list[StepSample], cfg: TrainConfig, stack: SimStack) -> NDArray:
    """Analytic gradient of :func:`replay_loss` in the network parameters."""
    gradient = np.zeros(net.parameter_count)
    for sample in samples:
        cache = net.forward_cached(sample.features)
        weights = net.mapping.weights(cache.raw)
        solution = solve_mhe(sample.window, weights, stack.estimator.max_iterations, stack.estimator.tolerance)
        _, grad_theta = theta_gradient(sample.window, weights, solution, sample.reference, cfg.W, cfg.squared_norm)
        gradient += net.backward(cache, grad_theta)
    return gradient


def end_to_end_gradcheck(
    net: WeightNet,
    ctx: WindContext,
    cfg: TrainConfig,
    stack: SimStack,
    trajectory: Trajectory,
    seed: int = 0,
    steps: int = 3,
    parameters: int = 50,
    h: float = 1e-5,
    floor: float = 1e-3,
) -> list[ParameterCheck]:
    """Compares the chained network gradient with central finite differences.

    The closed loop is flown once; features, windows and references are then
    held fixed while the network parameters are perturbed, so the check
    covers network, positivity map, MHE solve and loss, the same truncated
    gradient used for training.

    Args:
        h: Step relative to max(1, |parameter|).
        floor: Errors are relative to at least ``floor`` times the largest
            analytic gradient component, so components far below the
            finite-difference noise are not scored on their own scale.
    """
    samples = record_samples(net, ctx, cfg, stack, trajectory, seed, steps)
    analytic = replay_gradient(net, samples, cfg, stack)
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(net.parameter_count, size=min(parameters, net.parameter_count), replace=False))
    base = net.parameters()
    perturbed = net.copy()
    scale = float(np.max(np.abs(analytic))) if analytic.size else 0.0
    checks = []
    for index in indices:
        step = h * max(1.0, abs(base[index]))
        shifted = base.copy()
        shifted[index] = base[index] + step
        perturbed.set_parameters(shifted)
        upper = replay_loss(perturbed, samples, cfg, stack)
        shifted[index] = base[index] - step
        perturbed.set_parameters(shifted)
        lower = replay_loss(perturbed, samples, cfg, stack)
        numeric = (upper - lower) / (2 * step)
        a = float(analytic[index])
        denominator = max(abs(a), abs(numeric), floor * scale, 1e-12)
        checks.append(ParameterCheck(int(index), a, numeric, abs(a - numeric) / denominator))
    return checks
