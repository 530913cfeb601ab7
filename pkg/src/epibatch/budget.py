"""Iteration-budget arithmetic, schedule calibration, LR decay, early stopping.

Strategies that walk the slice list see ``ceil(train_size / batch_size)``
optimizer steps per epoch, while an episodic strategy runs a fixed number of
episodes per epoch regardless of dataset size.  Epoch-denominated schedules
(LR milestones, patience, epoch caps) therefore mean different iteration
budgets under different strategies; ``calibrate`` converts a schedule to
iteration counts against a reference strategy and re-expresses it in the
target strategy's epochs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace


class BudgetWarning(UserWarning):
    """A calibrated quantity disagrees with a previously reported figure."""


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def iterations_per_epoch(train_size, batch_size=None, episodes_per_epoch=None):
    """Optimizer steps per epoch for a strategy.

    Pass ``batch_size`` for strategies whose epoch covers the slice list
    (steps = train_size / batch_size rounded half up to the nearest whole
    batch, never below 1) or ``episodes_per_epoch`` for episodic strategies
    (steps = that constant, independent of dataset size).  Exactly one of the
    two must be given.

    All epoch arithmetic in this module rounds half up; it is the only
    convention consistent with both reference figures (8369/16 -> 523 and
    684/16 -> 43), which no floor or ceiling rule reproduces simultaneously.
    """
    if (batch_size is None) == (episodes_per_epoch is None):
        raise ValueError("pass exactly one of batch_size or episodes_per_epoch")
    if episodes_per_epoch is not None:
        if episodes_per_epoch <= 0:
            raise ValueError(f"episodes_per_epoch must be positive, got {episodes_per_epoch}")
        return int(episodes_per_epoch)
    if train_size <= 0:
        raise ValueError(f"train_size must be positive, got {train_size}")
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    # integer round-half-up of train_size / batch_size
    return max(1, (2 * train_size + batch_size) // (2 * batch_size))


@dataclass(frozen=True)
class ScheduleSpec:
    """Epoch-denominated training schedule: multi-step LR decay plus early stopping."""

    base_lr: float = 1e-4
    milestones: tuple = (30, 45)
    gamma: float = 0.1
    patience_epochs: int = 20
    max_epochs: int = 200
    iters_per_epoch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        ms = list(self.milestones)
        if any(m <= 0 for m in ms) or ms != sorted(set(ms)):
            raise ValueError(f"milestones must be positive and strictly increasing, got {ms}")
        if self.patience_epochs < 1:
            raise ValueError(f"patience_epochs must be >= 1, got {self.patience_epochs}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.iters_per_epoch < 1:
            raise ValueError(f"iters_per_epoch must be >= 1, got {self.iters_per_epoch}")

    def to_json(self):
        return {
            "base_lr": self.base_lr,
            "milestones": list(self.milestones),
            "gamma": self.gamma,
            "patience_epochs": self.patience_epochs,
            "max_epochs": self.max_epochs,
            "iters_per_epoch": self.iters_per_epoch,
        }


def lr_at(spec, step, unit="epoch"):
    """Learning rate at a step: ``base_lr * gamma^k`` with k = milestones at or before it.

    A milestone takes effect at the start of its epoch, so step 30 with
    milestones (30, 45) already runs at the decayed rate.  With
    ``unit="iteration"`` milestones are scaled by ``spec.iters_per_epoch``.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if unit == "epoch":
        thresholds = spec.milestones
    elif unit == "iteration":
        thresholds = tuple(m * spec.iters_per_epoch for m in spec.milestones)
    else:
        raise ValueError(f"unknown unit {unit!r}")
    k = sum(1 for t in thresholds if t <= step)
    return spec.base_lr * spec.gamma**k


# Figures quoted in earlier write-ups of the same calibration. When a computed
# value disagrees we keep the computed one and warn rather than silently
# matching; the 2,500-epoch cap quoted for the 43-iteration strategy is only
# consistent with 40 iterations per epoch.
_REPORTED_EPOCH_CAPS = {(100_000, 43): 2_500}


@dataclass(frozen=True)
class CalibratedSchedule:
    """A reference strategy's schedule in iterations, re-expressed in target epochs."""

    base_lr: float
    gamma: float
    milestone_iters: tuple
    patience_iters: int
    max_iters: int
    milestone_epochs: tuple
    patience_epochs: int
    max_epochs: int
    iters_per_epoch: int
    notes: tuple = field(default_factory=tuple)

    def to_schedule_spec(self):
        """Epoch-denominated ScheduleSpec for the target strategy."""
        return ScheduleSpec(
            base_lr=self.base_lr,
            milestones=self.milestone_epochs,
            gamma=self.gamma,
            patience_epochs=self.patience_epochs,
            max_epochs=self.max_epochs,
            iters_per_epoch=self.iters_per_epoch,
        )

    def to_json(self):
        return {
            "base_lr": self.base_lr,
            "gamma": self.gamma,
            "milestone_iters": list(self.milestone_iters),
            "patience_iters": self.patience_iters,
            "max_iters": self.max_iters,
            "milestone_epochs": list(self.milestone_epochs),
            "patience_epochs": self.patience_epochs,
            "max_epochs": self.max_epochs,
            "iters_per_epoch": self.iters_per_epoch,
            "notes": list(self.notes),
        }


def calibrate(spec, reference_ipe, target_ipe):
    """Re-express an epoch schedule, pinned to a reference strategy, in target epochs.

    Milestones, patience, and the epoch cap are first converted to iteration
    counts against ``reference_ipe`` and then back to target epochs by
    round-half-up division by ``target_ipe``.  When a computed value disagrees
    with a previously reported figure for the same arithmetic, the computed
    value is kept and a ``BudgetWarning`` is emitted; the discrepancy is also
    recorded in ``notes``.
    """
    if reference_ipe < 1:
        raise ValueError(f"reference_ipe must be >= 1, got {reference_ipe}")
    if target_ipe < 1:
        raise ValueError(f"target_ipe must be >= 1, got {target_ipe}")

    milestone_iters = tuple(m * reference_ipe for m in spec.milestones)
    patience_iters = spec.patience_epochs * reference_ipe
    max_iters = spec.max_epochs * reference_ipe

    milestone_epochs = tuple(_round_half_up(it / target_ipe) for it in milestone_iters)
    patience_epochs = _round_half_up(patience_iters / target_ipe)
    max_epochs = _round_half_up(max_iters / target_ipe)

    notes = []
    reported = _REPORTED_EPOCH_CAPS.get((max_iters, target_ipe))
    if reported is not None and reported != max_epochs:
        implied_ipe = max_iters / reported
        note = (
            f"computed max_epochs={max_epochs} (={max_iters} iters / {target_ipe} per epoch) "
            f"differs from the previously reported {reported}, which would require "
            f"{implied_ipe:g} iterations per epoch; keeping the computed value"
        )
        notes.append(note)
        warnings.warn(note, BudgetWarning, stacklevel=2)

    return CalibratedSchedule(
        base_lr=spec.base_lr,
        gamma=spec.gamma,
        milestone_iters=milestone_iters,
        patience_iters=patience_iters,
        max_iters=max_iters,
        milestone_epochs=milestone_epochs,
        patience_epochs=patience_epochs,
        max_epochs=max_epochs,
        iters_per_epoch=target_ipe,
        notes=tuple(notes),
    )


@dataclass(frozen=True)
class EarlyStopState:
    """Early-stopping controller state; update via early_stop_update.

    Improvement is strict (>) with no minimum delta. ``stopped`` is set once
    ``patience`` consecutive evaluations brought no improvement.
    """

    patience: int
    best_metric: float = -math.inf
    best_step: int = -1
    last_step: int = -1
    steps_since_improve: int = 0
    stopped: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def early_stop_update(state, step, metric):
    """Fold one evaluation into the early-stop state, returning the new state.

    Steps must be strictly increasing across calls; the metric must be finite.
    """
    if not math.isfinite(metric):
        raise ValueError(f"non-finite metric {metric} at step {step}")
    if step <= state.last_step:
        raise ValueError(f"steps must be strictly increasing, got {step} after {state.last_step}")
    if metric > state.best_metric:
        return replace(
            state,
            best_metric=float(metric),
            best_step=step,
            last_step=step,
            steps_since_improve=0,
            stopped=False,
        )
    since = step - state.best_step
    return replace(
        state,
        last_step=step,
        steps_since_improve=since,
        stopped=since >= state.patience,
    )


@dataclass(frozen=True)
class FixedPlan:
    """Fixed-iteration run plan: constant LR, no milestones, no early stopping."""

    iterations: int
    base_lr: float = 1e-4
    eval_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_json(self):
        return {
            "iterations": self.iterations,
            "base_lr": self.base_lr,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            iterations=data["iterations"],
            base_lr=data["base_lr"],
            eval_every=data["eval_every"],
        )


def fixed_budget(iterations, base_lr=1e-4, eval_every=100):
    """Plan a constant-LR run that hard-stops after exactly ``iterations`` steps."""
    return FixedPlan(iterations=iterations, base_lr=base_lr, eval_every=eval_every)
