from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence
import json
import logging
import os

import numpy as np
from numpy.typing import NDArray

from .config import GpConfig, SelectionConfig
from .gp import GpModel, gp_posterior
from .report import PerformanceTable
from .trainer import ContextTrainer
from .wind import WindContext

logger = logging.getLogger(__name__)

Embedding = Callable[[WindContext], NDArray]


def code_embedding(ctx: WindContext) -> NDArray:
    return ctx.embed("code")


def make_embedding(name: str) -> Embedding:
    return lambda ctx: ctx.embed(name)


@dataclass(frozen=True)
class GapModel:
    """Linear generalization gap alpha * ||c - c'|| between two contexts."""

    alpha: float = 1e-3

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    def gap(self, a: NDArray, b: NDArray) -> float:
        return self.alpha * float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def fit_gp(cfg: GpConfig, observations: Sequence[tuple[NDArray, float]]) -> GpModel:
    """GP over context coordinates conditioned on (coordinates, performance) pairs."""
    gp = GpModel(cfg.length_scale, cfg.signal_variance, cfg.noise_variance, cfg.prior_mean)
    for point, value in observations:
        gp = gp.with_observation(point, value)
    return gp


def acquisition(
    candidate: WindContext,
    table: PerformanceTable,
    gp: GpModel,
    beta: float,
    gap: GapModel,
    candidate_pool: Sequence[WindContext],
    floor: float = -1e3,
    embed: Embedding = code_embedding,
) -> float:
    """Expected positive improvement of training in `candidate` over the best models so far.

    a(c) = mean over c' of [mu(c) + sqrt(beta) sigma(c) - gap(c, c') - J_best(c')]_+,
    with J_best the negated composite loss of the table, or ``floor`` while
    no model exists.

    Raises:
        ValueError: If the pool is empty.
    """
    if not candidate_pool:
        raise ValueError("the candidate pool must not be empty")
    mean, variance = gp_posterior(gp, embed(candidate))
    optimistic = mean + np.sqrt(beta) * np.sqrt(variance)
    c = embed(candidate)
    brackets = [
        optimistic - gap.gap(c, embed(other)) - table.best_performance(other, floor) for other in candidate_pool
    ]
    return float(np.mean(np.maximum(brackets, 0.0)))


def select_next_context(
    pool: Sequence[WindContext],
    selected: Sequence[WindContext],
    table: PerformanceTable,
    gp: GpModel,
    beta: float,
    gap: GapModel,
    floor: float = -1e3,
    embed: Embedding = code_embedding,
) -> tuple[WindContext, dict]:
    """The unselected context with the highest acquisition.

    Ties go to the lowest (direction_code, speed_level).

    Returns:
        The chosen context and the acquisition value of every candidate, by name.

    Raises:
        ValueError: If every context has been selected.
    """
    taken = {ctx.key for ctx in selected}
    candidates = sorted((ctx for ctx in pool if ctx.key not in taken), key=lambda ctx: ctx.key)
    if not candidates:
        raise ValueError("all contexts of the pool have been selected")
    scores = {}
    best, best_score = None, -np.inf
    for ctx in candidates:
        score = acquisition(ctx, table, gp, beta, gap, pool, floor, embed)
        scores[ctx.name] = score
        if score > best_score:
            best, best_score = ctx, score
    return best, scores


@dataclass(frozen=True)
class SelectionStep:
    step: int
    chosen_context: str
    acquisition_per_candidate: dict
    training_loss: float
    training_converged: bool
    V_aggregate: float
    training_loss_history_ref: str = ""

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "chosen_context": self.chosen_context,
            "acquisition_per_candidate": self.acquisition_per_candidate,
            "training_loss": self.training_loss,
            "training_converged": self.training_converged,
            "training_loss_history_ref": self.training_loss_history_ref,
            "V_aggregate": self.V_aggregate,
        }


@dataclass
class ContextualResult:
    """Outcome of budgeted contextual learning.

    Attributes:
        model_ids: Models in the order they were trained.
        table: Their losses over the pool.
        trace: One entry per selection step.
    """

    model_ids: list
    table: PerformanceTable
    trace: list = field(default_factory=list)

    @property
    def contexts(self) -> list[str]:
        return [step.chosen_context for step in self.trace]


def run_contextual_learning(
    pool: Sequence[WindContext],
    budget: int,
    trainer: ContextTrainer,
    gp_cfg: Optional[GpConfig] = None,
    selection_cfg: Optional[SelectionConfig] = None,
) -> ContextualResult:
    """Selects, trains and evaluates `budget` contexts one after another.

    Each step fits the GP to the realised training performances (negated
    final training loss in the training context), trains in the context
    maximising the acquisition, and evaluates the new model over the whole
    pool to extend the performance table.

    Raises:
        ValueError: If the budget is outside [1, len(pool)].
    """
    gp_cfg = gp_cfg or GpConfig()
    selection_cfg = selection_cfg or SelectionConfig()
    if not 1 <= budget <= len(pool):
        raise ValueError(f"budget must lie in [1, {len(pool)}], got {budget}")
    embed = make_embedding(gp_cfg.embedding)
    gap = GapModel(selection_cfg.alpha)
    table = PerformanceTable(pool)
    result = ContextualResult(model_ids=[], table=table)
    selected, observations = [], []

    for step in range(1, budget + 1):
        gp = fit_gp(gp_cfg, observations)
        ctx, scores = select_next_context(
            pool, selected, table, gp, selection_cfg.beta, gap, selection_cfg.no_model_floor, embed
        )
        logger.info("step %d: selected %s (acquisition %.6g)", step, ctx.name, scores[ctx.name])
        model = trainer.train(ctx)
        if not model.converged:
            logger.warning("model %s did not converge; keeping its best parameters", model.model_id)
        table.update_value(model.model_id, trainer.evaluate_pool(model.model_id))
        selected.append(ctx)
        observations.append((embed(ctx), -model.training_loss))
        result.model_ids.append(model.model_id)
        result.trace.append(
            SelectionStep(
                step=step,
                chosen_context=ctx.name,
                acquisition_per_candidate=scores,
                training_loss=model.training_loss,
                training_converged=model.converged,
                V_aggregate=table.get_total_loss(),
                training_loss_history_ref=f"{model.model_id}.json",
            )
        )
    return result


def write_trace(trace: Sequence[SelectionStep], path: os.PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump([step.to_dict() for step in trace], handle, indent=2, sort_keys=True)


def read_trace(path: os.PathLike) -> list[SelectionStep]:
    with open(Path(path), "r", encoding="utf-8") as handle:
        return [SelectionStep(**entry) for entry in json.load(handle)]
