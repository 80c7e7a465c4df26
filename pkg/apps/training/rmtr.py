"""
Recursive multilevel trust-region driver: V-cycle and F-cycle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import CoherenceError, ConfigurationError, PropagationDiverged
from .hierarchy import prolong, restrict_gradient, restrict_params
from .resnet import NetworkObjective
from .trust_region import (
    LSR1,
    MODEL_DECREASE_GUARD,
    MODES,
    GradientDifferencePairs,
    SecantMemory,
    conv_control,
    tr_iterate,
)

logger = logging.getLogger(__name__)

COHERENCE_TOLERANCE = 1e-12
COHERENCE_MODES = ('assert', 'log', 'off')


@dataclass(frozen=True)
class CycleConfig:
    mu1: int = 1
    mu2: int = 1
    mu_coarse: int = 1
    mode: str = LSR1
    coherence: str = 'assert'
    # F-cycle: a level below the finest ends after this many cycles at most,
    # or once its gradient norm drops below level_gtol times the norm on entry
    cycles_per_level: int = 100
    level_gtol: float = 1e-2

    def __post_init__(self):
        errors = {}
        for name in ('mu1', 'mu2', 'mu_coarse'):
            if getattr(self, name) < 0:
                errors[name] = ['Iteration counts must be non-negative.']
        if self.cycles_per_level < 1:
            errors['cycles_per_level'] = ['At least one V-cycle per level.']
        if not 0.0 <= self.level_gtol < 1.0:
            errors['level_gtol'] = ['Must lie in [0, 1).']
        if self.mode not in MODES:
            errors['mode'] = [f"Unknown trust-region mode '{self.mode}'."]
        if self.coherence not in COHERENCE_MODES:
            errors['coherence'] = [f"Unknown coherence mode '{self.coherence}'."]
        if errors:
            raise ConfigurationError(errors)


class CoarseObjective:
    """
    H(theta) = L(theta) + <delta_g, theta - theta0>, so that grad H(theta0) is the
    restricted fine-level gradient.
    """

    def __init__(self, loss, theta0, delta_g):
        self.loss = loss
        self.theta0 = np.array(theta0, dtype=np.float64)
        self.delta_g = np.array(delta_g, dtype=np.float64)

    @property
    def level(self):
        return self.loss.level

    @property
    def counts(self):
        return getattr(self.loss, 'counts', None)

    def value(self, theta):
        return self.loss.value(theta) + self.delta_g @ (theta - self.theta0)

    def gradient(self, theta):
        return self.loss.gradient(theta) + self.delta_g

    def hvp(self, theta, v):
        return self.loss.hvp(theta, v)


def build_coarse_objective(fine_objective, theta_fine, hierarchy, level, coarse_loss):
    """
    Coarse objective for level ``level - 1`` anchored at restrict_params(theta_fine).

    Returns:
        (CoarseObjective, restricted fine gradient)
    """
    fine_spec, coarse_spec = hierarchy[level], hierarchy[level - 1]
    theta0 = restrict_params(theta_fine, fine_spec, coarse_spec)
    restricted = restrict_gradient(fine_objective.gradient(theta_fine), fine_spec, coarse_spec)
    delta_g = restricted - coarse_loss.gradient(theta0)
    return CoarseObjective(coarse_loss, theta0, delta_g), restricted


def coherence_error(coarse, restricted):
    """Relative mismatch ||grad H(theta0) - R grad H_fine|| / (1 + ||R grad H_fine||)."""
    mismatch = np.linalg.norm(coarse.gradient(coarse.theta0) - restricted)
    return mismatch / (1.0 + np.linalg.norm(restricted))


def multilevel_ratio(fine_before, fine_after, coarse_before, coarse_after):
    coarse_decrease = coarse_before - coarse_after
    if not coarse_decrease > MODEL_DECREASE_GUARD * (1.0 + abs(coarse_before)):
        return -np.inf
    fine_decrease = fine_before - fine_after
    if not np.isfinite(fine_decrease):
        return -np.inf
    return fine_decrease / coarse_decrease


class BatchContext:
    """
    Per-level objectives and secant pair sources bound to one mini-batch.

    Objectives are built lazily and kept for the lifetime of the context, so repeated
    V-cycles on the same batch share their evaluation caches.
    """

    def __init__(self, hierarchy, batch, ledger=None, batch_id=0, pairs=None):
        self.hierarchy = hierarchy
        self.batch = batch
        self.ledger = ledger
        self.batch_id = batch_id
        self._pairs = pairs or {}
        self._objectives = {}

    def objective(self, level):
        if level not in self._objectives:
            self._objectives[level] = NetworkObjective(
                self.hierarchy[level].cfg, self.batch, level=level, batch_id=self.batch_id, ledger=self.ledger
            )
        return self._objectives[level]

    def pairs(self, level):
        if level not in self._pairs:
            self._pairs[level] = GradientDifferencePairs()
        return self._pairs[level]


class CycleResult(NamedTuple):
    theta: np.ndarray
    state: object
    reduction: float


class RMTR:
    """
    Recursive multilevel trust-region method over a hierarchy.

    Holds one secant memory per level; memories persist across cycles until the owner
    clears them.
    """

    def __init__(self, hierarchy, cycle=None, memory_size=1):
        self.hierarchy = hierarchy
        self.cycle = cycle or CycleConfig()
        self.memories = {spec.level: SecantMemory(memory_size) for spec in hierarchy.levels}

    def resize_memories(self, memory_size):
        for memory in self.memories.values():
            memory.resize(memory_size)

    def _smooth(self, level, objective, theta, state, mu, context):
        return tr_iterate(
            objective, theta, state, self.memories[level], mu, self.cycle.mode, context.pairs(level)
        )

    def _check_coherence(self, level, coarse, restricted):
        if self.cycle.coherence == 'off':
            return
        error = coherence_error(coarse, restricted)
        if error >= COHERENCE_TOLERANCE:
            message = f"First-order coherence violated entering level {level - 1}: relative error {error:.3e}"
            if self.cycle.coherence == 'assert':
                raise CoherenceError(message)
            logger.warning(message)

    def vcycle(self, level, objective, theta, state, context):
        """
        One V-cycle rooted at ``level``.

        Pre-smoothing, coarse correction (direct TR solve when the next level is the
        coarsest, recursion otherwise) accepted through the multilevel ratio, then
        post-smoothing. Level 1 runs mu_coarse TR iterations only.
        """
        cycle = self.cycle
        if level == 1:
            result = self._smooth(1, objective, theta, state, cycle.mu_coarse, context)
            return CycleResult(result.theta, result.state, result.reduction)

        pre = self._smooth(level, objective, theta, state, cycle.mu1, context)
        theta, state, reduction = pre.theta, pre.state, pre.reduction

        coarse, restricted = build_coarse_objective(
            objective, theta, self.hierarchy, level, context.objective(level - 1)
        )
        self._check_coherence(level, coarse, restricted)
        if level == 2:
            inner = self._smooth(1, coarse, coarse.theta0, state, cycle.mu_coarse, context)
        else:
            inner = self.vcycle(level - 1, coarse, coarse.theta0, state, context)

        fine_spec, coarse_spec = self.hierarchy[level], self.hierarchy[level - 1]
        s = prolong(inner.theta - coarse.theta0, coarse_spec, fine_spec)
        fine_before = objective.value(theta)
        try:
            fine_after = objective.value(theta + s)
        except PropagationDiverged as exc:
            logger.debug(f"Prolonged correction diverged on level {level} ({exc})")
            fine_after = np.inf
        rho = multilevel_ratio(fine_before, fine_after, coarse.value(coarse.theta0), coarse.value(inner.theta))
        theta_next, state_next = conv_control(rho, theta, s, state)
        logger.debug(
            f"Level {level} coarse correction: rho={rho:.4g}, delta {state.delta:.3e} -> {state_next.delta:.3e}"
        )
        if state.accepts(rho):
            reduction += fine_before - fine_after
            if cycle.mode == LSR1:
                context.pairs(level).after_accept(objective, theta, theta_next, self.memories[level])
        theta, state = theta_next, state_next

        post = self._smooth(level, objective, theta, state, cycle.mu2, context)
        return CycleResult(post.theta, post.state, reduction + post.reduction)

    def fcycle(self, theta_coarse, state, context, on_cycle=None, level_done=None):
        """
        Nested iteration from level 1 to the finest level.

        Each level runs V-cycles rooted at that level until its own stopping rule fires:
        ``level_done(level, theta)``, the gradient rule of ``level_solved`` (levels below
        the finest only) or the ``cycles_per_level`` cap. ``on_cycle(level, result)``
        returning a truthy reason ends the whole F-cycle.

        Returns:
            FCycleResult with the finest iterate reached and the stop reason, if any.
        """
        theta = np.array(theta_coarse, dtype=np.float64)
        L = self.hierarchy.L
        for level in range(1, L + 1):
            if level > 1:
                theta = prolong(theta, self.hierarchy[level - 1], self.hierarchy[level])
                entry_loss = context.objective(level).value(theta)
                logger.info(f"F-cycle advancing to level {level} (K={self.hierarchy[level].K}), loss {entry_loss:.6g}")
            objective = context.objective(level)
            entry_norm = gradient_norm(objective, theta) if level < L and self.cycle.level_gtol > 0.0 else None
            for count in range(1, self.cycle.cycles_per_level + 1):
                result = self.vcycle(level, objective, theta, state, context)
                theta, state = result.theta, result.state
                reason = on_cycle(level, result) if on_cycle else None
                if reason:
                    return FCycleResult(theta, state, level, reason)
                if level_done and level_done(level, theta):
                    break
                if level < L and self.level_solved(objective, theta, entry_norm):
                    logger.info(f"Level {level} gradient rule met after {count} cycles")
                    break
        return FCycleResult(theta, state, L, None)

    def level_solved(self, objective, theta, entry_norm):
        """||grad f_l(theta)|| <= level_gtol * ||grad f_l|| at level entry; never with level_gtol = 0."""
        if self.cycle.level_gtol <= 0.0:
            return False
        return gradient_norm(objective, theta) <= self.cycle.level_gtol * entry_norm


def gradient_norm(objective, theta):
    return float(np.linalg.norm(objective.gradient(theta)))


class FCycleResult(NamedTuple):
    theta: np.ndarray
    state: object
    level: int
    stop_reason: object


def rmtr_vcycle(level, objective, theta, state, hierarchy, cycle, context, rmtr=None):
    """Functional entry point to ``RMTR.vcycle``; ``rmtr`` carries secant memories between calls."""
    rmtr = rmtr or RMTR(hierarchy, cycle)
    return rmtr.vcycle(level, objective, theta, state, context)


def rmtr_fcycle(hierarchy, theta_coarse, state, cycle, context, on_cycle=None, level_done=None, rmtr=None):
    rmtr = rmtr or RMTR(hierarchy, cycle)
    return rmtr.fcycle(theta_coarse, state, context, on_cycle=on_cycle, level_done=level_done)
