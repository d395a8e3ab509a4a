from abc import ABC, abstractmethod
from typing import Mapping, Optional, Sequence, TextIO, Union
import csv
import logging

import numpy as np
from numpy.typing import NDArray

from .wind import ContextPoint, WindContext

logger = logging.getLogger(__name__)

ContextLike = Union[WindContext, ContextPoint, tuple]


def _context_point(ctx: ContextLike) -> ContextPoint:
    if isinstance(ctx, WindContext):
        return ctx.point
    if isinstance(ctx, ContextPoint):
        return ctx
    direction, level = ctx
    return ContextPoint(float(direction), float(level))


class Report:
    """
    Represents the outcome of a command.

    Attributes:
        command: The command that produced the report.
        successful: Indicates if the command ran successfully.
        raised_exception: Stores any exception raised during execution.
    """

    def __init__(self, command: str):
        self.command: str = command
        self.successful: Optional[bool] = None
        self.raised_exception: Optional[Exception] = None

    def __repr__(self):
        return f"{self.__class__.__name__}()"


class PerformanceReport(Report, ABC):
    """
    Abstract base class for per-context performance reports, in loss units (lower is better).
    """

    def __init__(self, command: str = "PerformanceReport"):
        super().__init__(command)

    @abstractmethod
    def get_context_loss(self, ctx: ContextLike) -> float:
        """
        Best loss any model achieves in a context.

        Args:
            ctx: The context to look up.

        Returns:
            The composite loss in that context.
        """
        raise NotImplementedError()

    @abstractmethod
    def get_total_loss(self) -> float:
        """
        Aggregate loss over the whole context pool.

        Returns:
            The uniform mean of the per-context composite losses.
        """
        raise NotImplementedError()


class PerformanceTable(PerformanceReport):
    """Losses of every trained model in every pool context.

    Rows are models in training order, columns the pool contexts. The
    composite is the column-wise minimum, so adding a model never worsens it.
    Performance in the sense of the acquisition is the negated loss.

    Attributes:
        contexts: The pool, in column order.
        model_ids: Model identifiers, in row order.
    """

    def __init__(self, contexts: Sequence[WindContext]):
        super().__init__("PerformanceTable")
        if not contexts:
            raise ValueError("the context pool must not be empty")
        self.contexts = list(contexts)
        self.model_ids: list[str] = []
        self._rows: list[NDArray] = []

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [ctx.key for ctx in self.contexts]

    @property
    def matrix(self) -> NDArray:
        return np.array(self._rows).reshape(len(self._rows), len(self.contexts))

    def __len__(self):
        return len(self._rows)

    def column(self, ctx: ContextLike) -> int:
        """Column of a pool context; contexts outside the pool map to the nearest one."""
        point = _context_point(ctx)
        keys = self.keys
        if point.key in keys and np.allclose(point.vector, point.key):
            return keys.index(point.key)
        distances = [point.distance(c.point) for c in self.contexts]
        index = int(np.argmin(distances))
        logger.warning("context %s is not in the pool; using nearest %s", point.vector, self.contexts[index].name)
        return index

    def update_value(self, model_id: str, evals: Union[Mapping, Sequence[float]]) -> "PerformanceTable":
        """Appends one model's per-context losses.

        Args:
            model_id: Identifier of the new model.
            evals: Loss per pool context, either in column order or keyed by
                context key or name.

        Raises:
            ValueError: If a pool context is missing or a loss is not finite.
        """
        if isinstance(evals, Mapping):
            row = []
            for ctx in self.contexts:
                if ctx.key in evals:
                    row.append(evals[ctx.key])
                elif ctx.name in evals:
                    row.append(evals[ctx.name])
                else:
                    raise ValueError(f"evaluation of model {model_id!r} misses context {ctx.name}")
        else:
            row = list(evals)
            if len(row) != len(self.contexts):
                raise ValueError(f"expected {len(self.contexts)} losses, got {len(row)}")
        row = np.asarray(row, dtype=float)
        if not np.all(np.isfinite(row)):
            raise ValueError(f"losses of model {model_id!r} must be finite")
        self.model_ids.append(model_id)
        self._rows.append(row)
        return self

    def composite(self) -> NDArray:
        """Best loss per context over all models."""
        if not self._rows:
            raise ValueError("the performance table is empty")
        return self.matrix.min(axis=0)

    def get_context_loss(self, ctx: ContextLike) -> float:
        return float(self.composite()[self.column(ctx)])

    def get_total_loss(self) -> float:
        return float(np.mean(self.composite()))

    def best_performance(self, ctx: ContextLike, floor: float) -> float:
        """Best-so-far performance (negated loss) in a context; ``floor`` while the table is empty."""
        if not self._rows:
            return floor
        return -self.get_context_loss(ctx)

    def model_loss(self, model_id: str, ctx: ContextLike) -> float:
        return float(self._rows[self.model_ids.index(model_id)][self.column(ctx)])

    def select_model_at_test(self, ctx: ContextLike) -> str:
        """The model with the lowest loss in a context; the earliest-trained wins ties."""
        if not self._rows:
            raise ValueError("the performance table is empty")
        column = self.matrix[:, self.column(ctx)]
        return self.model_ids[int(np.argmin(column))]

    def best_mean_model(self) -> str:
        """Model with the lowest mean loss over the pool (the single-model baseline)."""
        if not self._rows:
            raise ValueError("the performance table is empty")
        return self.model_ids[int(np.argmin(self.matrix.mean(axis=1)))]

    def subset(self, model_ids: Sequence[str]) -> "PerformanceTable":
        """A table with only the given models, in the given order."""
        table = PerformanceTable(self.contexts)
        for model_id in model_ids:
            table.update_value(model_id, self._rows[self.model_ids.index(model_id)])
        return table

    def write_csv(self, stream: TextIO):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["model"] + [ctx.name for ctx in self.contexts])
        for model_id, row in zip(self.model_ids, self._rows):
            writer.writerow([model_id] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, stream: TextIO, pool: Sequence[WindContext]) -> "PerformanceTable":
        reader = csv.reader(stream)
        header = next(reader)
        by_name = {ctx.name: ctx for ctx in pool}
        try:
            contexts = [by_name[name] for name in header[1:]]
        except KeyError as error:
            raise ValueError(f"unknown context column {error}") from error
        table = cls(contexts)
        for row in reader:
            table.update_value(row[0], [float(v) for v in row[1:]])
        return table

    def __repr__(self):
        return f"PerformanceTable(models={self.model_ids}, V={self.get_total_loss() if self._rows else None})"


def update_value(table: PerformanceTable, model_id: str, evals) -> PerformanceTable:
    return table.update_value(model_id, evals)


def select_model_at_test(table: PerformanceTable, ctx: ContextLike) -> str:
    return table.select_model_at_test(ctx)
