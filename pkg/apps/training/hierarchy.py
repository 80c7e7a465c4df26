"""
Multilevel hierarchy of ResNets obtained by refining the time grid, plus the transfer
operators between adjacent levels.

Only the residual-block controls change between levels; the input lift Q and the
classifier head (W_K, b_K) are shared and transferred by identity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import LevelMismatch
from .resnet import ParamVector, as_flat

logger = logging.getLogger(__name__)

INTERVAL_DOUBLING = 'interval_doubling'
NODE_DOUBLING = 'node_doubling'
REFINEMENT_RULES = (INTERVAL_DOUBLING, NODE_DOUBLING)


@dataclass(frozen=True)
class LevelSpec:
    level: int
    cfg: object

    @property
    def K(self):
        return self.cfg.K

    @property
    def dt(self):
        return self.cfg.dt


@dataclass(frozen=True)
class Hierarchy:
    levels: tuple
    refinement_rule: str = INTERVAL_DOUBLING

    def __post_init__(self):
        if not self.levels:
            raise ValueError('A hierarchy needs at least one level')
        for position, spec in enumerate(self.levels, start=1):
            if spec.level != position:
                raise ValueError(f"Level indices must be contiguous from 1, got {spec.level} at {position}")

    @property
    def L(self):
        return len(self.levels)

    @property
    def finest(self):
        return self.levels[-1]

    @property
    def coarsest(self):
        return self.levels[0]

    def __getitem__(self, level):
        """1-based access: hierarchy[1] is the coarsest level."""
        if not 1 <= level <= self.L:
            raise LevelMismatch(f"Level {level} outside 1..{self.L}")
        return self.levels[level - 1]

    def cost_ratio(self, level):
        """Cost of one level-l evaluation relative to the finest level."""
        if self.refinement_rule == INTERVAL_DOUBLING:
            return 2.0 ** (level - self.L)
        return self[level].K / self.finest.K

    def finest_only(self):
        """Single-level hierarchy made of the training target network."""
        return Hierarchy((LevelSpec(1, self.finest.cfg),), self.refinement_rule)

    def truncated(self, L):
        """The coarsest L levels, used by nested (F-cycle) iteration."""
        return Hierarchy(self.levels[:L], self.refinement_rule)


def refine_blocks(K, rule):
    if rule == INTERVAL_DOUBLING:
        return 2 * K
    if rule == NODE_DOUBLING:
        return 2 * K - 1
    raise ValueError(f"Unknown refinement rule '{rule}'")


def build_hierarchy(base_cfg, L, rule=INTERVAL_DOUBLING):
    """
    Build L levels by uniform refinement in time: dt halves from one level to the next.

    Under node doubling the finer level keeps T/dt = 2K - 1 blocks, so the final time of
    the finer network shrinks by dt/2; interval doubling keeps T fixed.

    Args:
        base_cfg: NetworkConfig of level 1 (coarsest)
        L: number of levels, >= 1
        rule: 'interval_doubling' (default) or 'node_doubling'

    Returns:
        Hierarchy ordered coarsest -> finest.
    """
    if L < 1:
        raise ValueError(f"Hierarchy needs L >= 1, got {L}")
    if rule not in REFINEMENT_RULES:
        raise ValueError(f"Unknown refinement rule '{rule}'")
    levels = [LevelSpec(1, base_cfg)]
    for level in range(2, L + 1):
        coarse = levels[-1].cfg
        K = refine_blocks(coarse.K, rule)
        dt = 0.5 * coarse.dt
        fine = base_cfg.__class__(**{**coarse.__dict__, 'K': K, 'T': dt * K})
        levels.append(LevelSpec(level, fine))
    hierarchy = Hierarchy(tuple(levels), rule)
    logger.debug(f"Built {L}-level hierarchy ({rule}) with blocks {[spec.K for spec in levels]}")
    return hierarchy


def _check_step(source, target, step):
    if target.level != source.level + step:
        direction = 'finer' if step > 0 else 'coarser'
        raise LevelMismatch(
            f"Transfer from level {source.level} to level {target.level}: target must be the next {direction} level"
        )


def _pair_index(K_fine, K_coarse):
    """Coarse parent of every fine block: fine blocks 2k and 2k+1 descend from coarse block k."""
    parents = np.arange(K_fine) // 2
    if parents[-1] >= K_coarse:
        raise LevelMismatch(f"{K_fine} fine blocks cannot descend from {K_coarse} coarse blocks")
    return parents


def prolong(theta, source, target):
    """
    Coarse -> fine: Q and head copied, block controls duplicated
    (theta_{2k} = theta_{2k+1} = theta_k; under node doubling the last odd copy is dropped).
    """
    _check_step(source, target, +1)
    coarse = ParamVector(source.cfg, as_flat(theta))
    fine = ParamVector(target.cfg)
    fine.Q[...] = coarse.Q
    fine.blocks[...] = coarse.blocks[_pair_index(target.K, source.K)]
    fine.head_W[...] = coarse.head_W
    fine.head_b[...] = coarse.head_b
    return fine.flat


def restrict_gradient(g_fine, source, target):
    """Fine -> coarse with the exact transpose of ``prolong``: coarse block k = fine 2k + fine 2k+1."""
    _check_step(source, target, -1)
    fine = ParamVector(source.cfg, as_flat(g_fine))
    coarse = ParamVector(target.cfg)
    coarse.Q[...] = fine.Q
    parents = _pair_index(source.K, target.K)
    np.add.at(coarse.blocks, parents, fine.blocks)
    coarse.head_W[...] = fine.head_W
    coarse.head_b[...] = fine.head_b
    return coarse.flat


def restrict_params(theta_fine, source, target):
    """Fine -> coarse iterate transfer: coarse block k = mean of its fine children; Q and head copied."""
    _check_step(source, target, -1)
    fine = ParamVector(source.cfg, as_flat(theta_fine))
    coarse = ParamVector(target.cfg)
    coarse.Q[...] = fine.Q
    parents = _pair_index(source.K, target.K)
    children = np.bincount(parents, minlength=target.K)
    blocks = coarse.blocks
    if np.all(children == 2):
        blocks[...] = 0.5 * (fine.blocks[0::2] + fine.blocks[1::2])
    else:
        np.add.at(blocks, parents, fine.blocks)
        blocks /= children[:, None]
    coarse.head_W[...] = fine.head_W
    coarse.head_b[...] = fine.head_b
    return coarse.flat
