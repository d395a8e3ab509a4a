from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence
import logging
import os

import numpy as np

from .config import Config, config_hash
from .network import WeightNet, load_checkpoint, save_checkpoint
from .simulation import SimStack, stream_seed
from .training import TrainResult, evaluate_loss, train_to_convergence
from .trajectory import make_trajectory
from .wind import WindContext, context_pairs

logger = logging.getLogger(__name__)

EVAL_STREAM = 20


@dataclass(frozen=True)
class TrainedModel:
    """A model trained in one context.

    Attributes:
        model_id: Identifier, the name of the training context.
        context: The training context.
        training_loss: Final mean episode loss in the training context.
        converged: Whether training met the convergence rule.
    """

    model_id: str
    context: WindContext
    training_loss: float
    converged: bool = True


class ContextTrainer(ABC):
    """Abstract base class for training and evaluating one model per context.

    Attributes:
        pool: The contexts models can be trained and evaluated in.
    """

    def __init__(self, pool: Sequence[WindContext]):
        if not pool:
            raise ValueError("the context pool must not be empty")
        self.pool = list(pool)

    @abstractmethod
    def train(self, ctx: WindContext) -> TrainedModel:
        """Trains a model in a context.

        Args:
            ctx: The training context.

        Returns:
            The trained model with its final training loss.
        """
        pass

    @abstractmethod
    def evaluate(self, model_id: str, ctx: WindContext) -> float:
        """
        Loss of a trained model flown in a context, without updates.

        Args:
            model_id: A model returned by :meth:`train`.
            ctx: The evaluation context.

        Returns:
            The mean evaluation loss.
        """
        pass

    def evaluate_pool(self, model_id: str) -> dict:
        """Losses of a model in every pool context, keyed by context key."""
        return {ctx.key: self.evaluate(model_id, ctx) for ctx in self.pool}


def context_seed(seed: int, ctx: WindContext) -> int:
    """Per-context training seed; independent of the order contexts are trained in."""
    return seed * 100 + context_pairs().index(ctx.key)


def _evaluate_job(config: Config, parameters, ctx: WindContext, seeds: list) -> float:
    net = WeightNet.zeros()
    net.set_parameters(parameters)
    stack = SimStack.from_config(config)
    trajectory = make_trajectory("line", config.experiment.speed, config.experiment.rise)
    return evaluate_loss(net, ctx, config.train, stack, trajectory, seeds)


class SimulationTrainer(ContextTrainer):
    """Trains weight networks on the straight-line flight of each context.

    Trained networks and evaluations are cached, so budgeted and full runs
    share their work. With a store directory every trained network is also
    written as a checkpoint and reloaded on later runs with the same
    configuration.

    Attributes:
        config: Resolved configuration.
        store: Optional checkpoint directory.
    """

    def __init__(self, config: Config, pool: Optional[Sequence[WindContext]] = None, store: Optional[os.PathLike] = None):
        super().__init__(config.pool() if pool is None else pool)
        self.config = config
        self.stack = SimStack.from_config(config)
        self.trajectory = make_trajectory("line", config.experiment.speed, config.experiment.rise)
        self.store = Path(store) if store is not None else None
        self.nets: dict[str, WeightNet] = {}
        self.models: dict[str, TrainedModel] = {}
        self.results: dict[str, TrainResult] = {}
        self._evaluations: dict[tuple, float] = {}

    def _checkpoint(self, ctx: WindContext) -> Optional[Path]:
        return self.store / f"{ctx.name}.json" if self.store is not None else None

    def _load(self, ctx: WindContext) -> Optional[TrainedModel]:
        path = self._checkpoint(ctx)
        if path is None or not path.exists():
            return None
        net, metadata = load_checkpoint(path)
        if metadata.get("config_hash") != config_hash(self.config):
            logger.info("ignoring checkpoint %s trained with another configuration", path)
            return None
        self.nets[ctx.name] = net
        history = metadata["loss_history"]
        loss = history[-1] if metadata["converged"] else min(history)
        return TrainedModel(ctx.name, ctx, loss, metadata["converged"])

    def train(self, ctx: WindContext) -> TrainedModel:
        if ctx.name in self.models:
            return self.models[ctx.name]
        model = self._load(ctx)
        if model is None:
            seed = context_seed(self.config.train.seed, ctx)
            train_cfg = self.config.train
            net = WeightNet.initialise(np.random.default_rng(seed), train_cfg.initial_mhe_weights(), train_cfg.init_scale)
            result = train_to_convergence(net, ctx, train_cfg, self.stack, self.trajectory, seed)
            self.nets[ctx.name] = result.net
            self.results[ctx.name] = result
            loss = result.final_loss if result.converged else result.best_loss
            model = TrainedModel(ctx.name, ctx, loss, result.converged)
            path = self._checkpoint(ctx)
            if path is not None:
                save_checkpoint(result.net, path, {**result.metadata(), "config_hash": config_hash(self.config)})
        self.models[ctx.name] = model
        return model

    def net(self, model_id: str) -> WeightNet:
        return self.nets[model_id]

    def evaluation_seeds(self, ctx: WindContext) -> list[int]:
        base = context_seed(self.config.train.seed, ctx)
        return [stream_seed(base, EVAL_STREAM, i) for i in range(self.config.experiment.eval_samples)]

    def evaluate(self, model_id: str, ctx: WindContext) -> float:
        key = (model_id, ctx.key)
        if key not in self._evaluations:
            self._evaluations[key] = evaluate_loss(
                self.nets[model_id], ctx, self.config.train, self.stack, self.trajectory, self.evaluation_seeds(ctx)
            )
        return self._evaluations[key]

    def evaluate_pool(self, model_id: str) -> dict:
        missing = [ctx for ctx in self.pool if (model_id, ctx.key) not in self._evaluations]
        workers = self.config.experiment.workers
        if workers > 1 and len(missing) > 1:
            parameters = self.nets[model_id].parameters()
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = [
                    executor.submit(_evaluate_job, self.config, parameters, ctx, self.evaluation_seeds(ctx))
                    for ctx in missing
                ]
                for ctx, future in zip(missing, futures):
                    self._evaluations[(model_id, ctx.key)] = future.result()
        losses = super().evaluate_pool(model_id)
        logger.info("evaluated %s in %d contexts", model_id, len(losses))
        return losses
