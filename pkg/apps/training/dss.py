"""
Dynamic sample size outer loop.

Epochs sweep overlapping mini-batches with one V-cycle per batch (a nonlinear block
Gauss-Seidel pass), then compare the full-dataset decrease with the average local
decrease. Poor agreement rejects the epoch and/or enlarges the mini-batches.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError, PropagationDiverged
from .hierarchy import prolong
from .resnet import NetworkObjective
from .rmtr import RMTR, BatchContext, CycleConfig, gradient_norm
from .trust_region import LSR1, MODEL_DECREASE_GUARD, GradientDifferencePairs, TrustRegionState

logger = logging.getLogger(__name__)

STOCHASTIC = 'stochastic'
DETERMINISTIC = 'deterministic'

PAIRS_OVERLAP = 'overlap'
PAIRS_SAMPLED = 'sampled'
PAIR_SOURCES = (PAIRS_OVERLAP, PAIRS_SAMPLED)

FULL_DATASET_BATCH = -1


@dataclass(frozen=True)
class MiniBatchPlan:
    batches: tuple
    mbs: int
    overlap: int

    def __len__(self):
        return len(self.batches)

    def overlap_set(self, b):
        """
        Samples shared with the next batch; the last batch reuses the set it shares with
        its predecessor. Without overlap (or with one batch) the batch itself.
        """
        if self.overlap == 0 or len(self.batches) == 1:
            return self.batches[b]
        if b == len(self.batches) - 1:
            b -= 1
        return np.intersect1d(self.batches[b], self.batches[b + 1])


def gen_minibatches(dataset, mbs, overlap, rng):
    """
    Shuffle the dataset indices and tile them with stride mbs - overlap.

    The final batch absorbs the remainder. ``overlap`` is clamped to mbs // 2 so that
    non-consecutive batches stay disjoint. mbs >= |D| yields one unshuffled full batch.

    Args:
        dataset: sample count or any sized object
        mbs: mini-batch size, >= 1
        overlap: samples shared by consecutive batches, 0 <= overlap < mbs
        rng: numpy Generator
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if mbs < 1:
        raise ConfigurationError({'sampling.mbs0': ['Mini-batch size must be at least 1.']})
    if overlap < 0:
        raise ConfigurationError({'sampling.overlap': ['Overlap must be non-negative.']})
    if mbs >= n:
        return MiniBatchPlan((np.arange(n),), n, 0)
    if 2 * overlap > mbs:
        logger.warning(f"Overlap {overlap} exceeds half the mini-batch size {mbs}; clamped to {mbs // 2}")
        overlap = mbs // 2
    order = rng.permutation(n)
    stride = mbs - overlap
    count = (n - mbs) // stride + 1
    batches = [order[b * stride:b * stride + mbs] for b in range(count - 1)]
    batches.append(order[(count - 1) * stride:])
    return MiniBatchPlan(tuple(batches), mbs, overlap)


def global_ratio(loss_full_before, loss_full_after, local_reductions):
    """Full-dataset decrease over the mean local decrease; -inf when the mean is not positive."""
    if len(local_reductions) < 1:
        raise ValueError('At least one local reduction is required')
    mean_local = sum(local_reductions) / len(local_reductions)
    if not mean_local > MODEL_DECREASE_GUARD * (1.0 + abs(loss_full_before)):
        return -np.inf
    return (loss_full_before - loss_full_after) / mean_local


@dataclass(frozen=True)
class DssControl:
    zeta1: float = 0.1
    zeta2: float = 0.0
    omega: float = 2.0

    def __post_init__(self):
        errors = {}
        if not self.zeta1 > 0:
            errors['zeta1'] = ['Must be positive.']
        if not 0 <= self.zeta2 <= 0.2:
            errors['zeta2'] = ['Must lie in [0, 0.2].']
        if not self.omega > 1:
            errors['omega'] = ['Must exceed 1.']
        if errors:
            raise ConfigurationError(errors)


@dataclass(frozen=True)
class DssState:
    n_samples: int
    mbs: int
    memory_size: int = 1
    epoch: int = 0
    control: DssControl = field(default_factory=DssControl)

    @property
    def regime(self):
        return DETERMINISTIC if self.mbs >= self.n_samples else STOCHASTIC


class GcontrolOutcome(NamedTuple):
    theta: np.ndarray
    state: DssState
    accepted: bool
    increased: bool


def gcontrol(rho_g, theta_before, theta_trial, state):
    """
    Accept the trial iff rho_G > zeta1; grow mbs to min(ceil(omega * mbs), |D|) iff
    rho_G < zeta2, adding one secant pair of memory per growth.
    """
    control = state.control
    accepted = rho_g > control.zeta1
    theta = theta_trial if accepted else np.array(theta_before, copy=True)
    increased = False
    if rho_g < control.zeta2:
        mbs = min(math.ceil(control.omega * state.mbs), state.n_samples)
        if mbs > state.mbs:
            state = replace(state, mbs=mbs, memory_size=state.memory_size + 1)
            increased = True
    return GcontrolOutcome(theta, state, accepted, increased)


def secant_pair_overlap(params_next, params_curr, overlap_objective):
    """(s, z) with z the gradient variation measured on the overlap samples only."""
    s = np.asarray(params_next) - np.asarray(params_curr)
    if not np.any(s):
        return s, np.zeros_like(s)
    z = overlap_objective.gradient(params_next) - overlap_objective.gradient(params_curr)
    return s, z


def secant_pairs_sampled(objective, params, M, rng):
    """
    M pairs with s drawn i.i.d. from U(0, 1) and z = hvp(params, s).

    Pairs are screened by the SR1 safeguard when pushed into a memory.
    """
    if M < 1:
        raise ValueError(f"Need at least one sampled pair, got {M}")
    pairs = []
    for _ in range(M):
        s = rng.uniform(0.0, 1.0, size=np.shape(params))
        pairs.append((s, objective.hvp(params, s)))
    return pairs


class SampledPairs:
    """Fresh sampled curvature pairs before every subproblem solve."""

    def __init__(self, rng):
        self.rng = rng

    def prepare(self, objective, theta, memory):
        memory.clear()
        for s, z in secant_pairs_sampled(objective, theta, memory.capacity, self.rng):
            memory.push(s, z)

    def after_accept(self, objective, theta_old, theta_new, memory):
        return False


class EpochReport(NamedTuple):
    epoch: int
    level: int
    theta: np.ndarray
    work: float
    mbs: int
    delta: float
    rho_g: float
    accepted: bool
    mbs_changed: bool
    n_batches: int
    memory_size: int
    regime: str
    local_reduction: float


class DssResult(NamedTuple):
    theta: np.ndarray
    level: int
    tr_state: TrustRegionState
    dss_state: DssState
    epochs: int
    stop_reason: str


class DssRmtr:
    """
    Hybrid stochastic-deterministic multilevel training.

    With a single level this is the DSS trust-region method; with mbs0 = |D| every
    epoch is one deterministic V-cycle over the full dataset.

    Args:
        hierarchy: Hierarchy to train; its finest level is the target network
        train: Batch holding the full training set
        cycle: CycleConfig
        tr_state: initial TrustRegionState (radius and acceptance constants)
        control: DssControl
        rng: numpy Generator driving mini-batch shuffles and sampled pairs
        ledger: WorkLedger charged by every objective
        mbs0: initial mini-batch size; None for the full dataset
        overlap_fraction: overlap o = round(fraction * mbs0), frozen for the run
        global_period: epochs per global ratio test
        memory_size: initial secant memory size M0
        pair_source: 'overlap' or 'sampled'
    """

    def __init__(self, hierarchy, train, cycle=None, tr_state=None, control=None, rng=None, ledger=None,
                 mbs0=None, overlap_fraction=0.2, global_period=1, memory_size=1, pair_source=PAIRS_OVERLAP):
        if pair_source not in PAIR_SOURCES:
            raise ConfigurationError({'solver.hessian': [f"Unknown secant pair source '{pair_source}'."]})
        if global_period < 1:
            raise ConfigurationError({'sampling.global_period': ['Must be at least 1.']})
        n = train.size
        mbs0 = n if mbs0 is None else int(mbs0)
        if not 1 <= mbs0:
            raise ConfigurationError({'sampling.mbs0': ['Mini-batch size must be at least 1.']})
        self.hierarchy = hierarchy
        self.train = train
        self.cycle = cycle or CycleConfig()
        self.tr_state = tr_state or TrustRegionState()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ledger = ledger
        self.mbs0 = min(mbs0, n)
        self.memory_size0 = int(memory_size)
        self.overlap = int(round(overlap_fraction * self.mbs0))
        self.global_period = int(global_period)
        self.pair_source = pair_source
        self.dss_state = DssState(n, self.mbs0, self.memory_size0, 0, control or DssControl())
        self.rmtr = RMTR(hierarchy, self.cycle, memory_size)
        self._full_objectives = {}
        self._context = None
        self._context_key = None

    def full_objective(self, level):
        """Full-training-set objective of ``level``, used by the global ratio test."""
        if level not in self._full_objectives:
            self._full_objectives[level] = NetworkObjective(
                self.hierarchy[level].cfg, self.train, level=level, batch_id=FULL_DATASET_BATCH, ledger=self.ledger
            )
        return self._full_objectives[level]

    def _pairs_for(self, plan, b, root):
        if self.cycle.mode != LSR1:
            return {}
        if self.pair_source == PAIRS_SAMPLED:
            return {spec.level: SampledPairs(self.rng) for spec in self.hierarchy.levels}
        pairs = {spec.level: GradientDifferencePairs() for spec in self.hierarchy.levels}
        overlap = plan.overlap_set(b)
        if len(overlap) != len(plan.batches[b]):
            pairs[root] = GradientDifferencePairs(NetworkObjective(
                self.hierarchy[root].cfg, self.train.subset(overlap), level=root, batch_id=b, ledger=self.ledger
            ))
        return pairs

    def _context_for(self, plan, b, root):
        """Batch context; memories below ``root`` are cleared whenever the batch changes."""
        indices = plan.batches[b]
        key = (root, b, np.sort(indices).tobytes())
        if key != self._context_key:
            batch = self.train.subset(indices)
            context = BatchContext(self.hierarchy, batch, self.ledger, batch_id=b, pairs=self._pairs_for(plan, b, root))
            self._context, self._context_key = context, key
            for level, memory in self.rmtr.memories.items():
                if level < root:
                    memory.clear()
        return self._context

    def _local_phase(self, root, plan, theta, state):
        reductions = []
        for b in range(len(plan)):
            context = self._context_for(plan, b, root)
            result = self.rmtr.vcycle(root, context.objective(root), theta, state, context)
            theta, state = result.theta, result.state
            reductions.append(result.reduction)
            logger.debug(f"Batch {b}/{len(plan)}: local reduction {result.reduction:.4g}, delta {state.delta:.3e}")
        return theta, state, reductions

    def _reset_sampling(self):
        """Back to mbs0 and M0 with empty memories, as on entry to a new F-cycle level."""
        self.dss_state = replace(self.dss_state, mbs=self.mbs0, memory_size=self.memory_size0)
        for memory in self.rmtr.memories.values():
            memory.clear()
        self.rmtr.resize_memories(self.memory_size0)
        self._context = self._context_key = None

    def _work(self):
        return self.ledger.total() if self.ledger is not None else 0.0

    def _train_level(self, level, theta, state, epoch, epoch_max, observer, level_done):
        """
        DSS epochs with V-cycles rooted at ``level``.

        Levels below the finest also end on ``level_done``, on the F-cycle gradient rule
        (deterministic regime only) or after ``cycles_per_level`` epochs.

        Returns:
            (theta, state, epoch, reason); reason is None when the level finished.
        """
        coarse = level < self.hierarchy.L
        full = self.full_objective(level)
        anchor = theta.copy()
        period_reductions = []
        entry_norm = None
        level_epochs = 0
        while epoch < epoch_max:
            if self.ledger is not None:
                self.ledger.begin_epoch(epoch)
            dss = self.dss_state = replace(self.dss_state, epoch=epoch)
            plan = gen_minibatches(dss.n_samples, dss.mbs, self.overlap, self.rng)
            if coarse and entry_norm is None and dss.regime == DETERMINISTIC and self.cycle.level_gtol > 0.0:
                entry_norm = gradient_norm(self._context_for(plan, 0, level).objective(level), theta)
            theta, state, reductions = self._local_phase(level, plan, theta, state)
            period_reductions.extend(reductions)
            rho_g, accepted, changed = np.nan, True, False
            closes_period = (epoch + 1) % self.global_period == 0
            if dss.regime == STOCHASTIC and closes_period:
                rho_g = global_ratio(full.value(anchor), full.value(theta), period_reductions)
                outcome = gcontrol(rho_g, anchor, theta, dss)
                theta, accepted, changed = outcome.theta, outcome.accepted, outcome.increased
                self.dss_state = outcome.state
                if not accepted:
                    self.rmtr.memories[level].clear()
                    logger.warning(f"Epoch {epoch}: global step rejected (rho_G={rho_g:.4g})")
                if changed:
                    self.rmtr.resize_memories(self.dss_state.memory_size)
                    logger.info(
                        f"Epoch {epoch}: mini-batch size {dss.mbs} -> {self.dss_state.mbs}, "
                        f"memory {self.dss_state.memory_size}"
                    )
            if closes_period or self.dss_state.regime == DETERMINISTIC:
                anchor = theta.copy()
                period_reductions = []
            report = EpochReport(
                epoch, level, theta, self._work(), self.dss_state.mbs, state.delta, rho_g, accepted, changed,
                len(plan), self.dss_state.memory_size, dss.regime, float(sum(reductions)),
            )
            epoch += 1
            level_epochs += 1
            reason = observer(report) if observer else None
            if reason:
                return theta, state, epoch, reason
            if not coarse:
                continue
            if level_done and level_done(level, theta):
                logger.info(f"Level {level} stopping rule met after {level_epochs} epochs")
                return theta, state, epoch, None
            if entry_norm is not None and dss.regime == DETERMINISTIC and self.rmtr.level_solved(
                self._context.objective(level), theta, entry_norm
            ):
                logger.info(f"Level {level} gradient rule met after {level_epochs} epochs")
                return theta, state, epoch, None
            if level_epochs >= self.cycle.cycles_per_level:
                logger.info(f"Level {level} reached its cap of {level_epochs} epochs")
                return theta, state, epoch, None
        return theta, state, epoch, 'epoch_limit'

    def run(self, theta0, epoch_max, observer=None, fcycle=False, level_done=None):
        """
        Train until ``observer`` returns a stop reason or ``epoch_max`` epochs have run.

        With ``fcycle`` the run starts on level 1 and moves up one level whenever the
        current level's stopping rule fires; each new level restarts from mbs0 and M0.

        Args:
            theta0: initial parameters (coarsest level when ``fcycle``, finest otherwise)
            epoch_max: epoch limit over all levels
            observer: callable(EpochReport) -> stop reason or None, called after every epoch
            fcycle: start with an F-cycle
            level_done: callable(level, theta) -> bool, ends a level below the finest

        Returns:
            DssResult
        """
        theta = np.array(theta0, dtype=np.float64)
        state = self.tr_state
        L = self.hierarchy.L
        levels = list(range(1, L + 1)) if fcycle else [L]
        epoch = 0
        level = levels[0]
        try:
            for level in levels:
                if level != levels[0]:
                    theta = prolong(theta, self.hierarchy[level - 1], self.hierarchy[level])
                    self._reset_sampling()
                    logger.info(
                        f"F-cycle advancing to level {level} (K={self.hierarchy[level].K}) at epoch {epoch}, "
                        f"mbs reset to {self.mbs0}"
                    )
                theta, state, epoch, reason = self._train_level(
                    level, theta, state, epoch, epoch_max, observer, level_done
                )
                if reason:
                    return DssResult(theta, level, state, self.dss_state, epoch, reason)
        except PropagationDiverged:
            logger.error(
                f"Propagation diverged in epoch {epoch} on level {level}: mbs={self.dss_state.mbs}, "
                f"delta={state.delta:.3e}, |theta|={np.linalg.norm(theta):.3e}, W={self._work():.4g}"
            )
            raise
        return DssResult(theta, level, state, self.dss_state, epoch, 'epoch_limit')


def dss_rmtr(hierarchy, theta0, delta0, epoch_max, mbs0, overlap, train, cycle=None, rng=None, ledger=None,
             observer=None, **options):
    """
    Functional form of ``DssRmtr``. ``overlap`` is the overlap fraction of mbs0.
    """
    tr_state = options.pop('tr_state', None) or TrustRegionState(delta=delta0)
    engine = DssRmtr(hierarchy, train, cycle=cycle, tr_state=tr_state, rng=rng, ledger=ledger, mbs0=mbs0,
                     overlap_fraction=overlap, **options)
    return engine.run(theta0, epoch_max, observer=observer)
