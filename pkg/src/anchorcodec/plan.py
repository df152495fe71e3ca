"""Coding plans: which anchors are coded at which stage, with which context parent.

A plan is a list of stages from coarse to fine. Every coded item is one
(anchor, stage) pair; items are numbered in coding order and a stage's
``parents`` refer to item ids of earlier stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partition import LevelPartition

VARIANTS = ("full", "no-hyperprior", "no-context", "no-anchor-forward", "single-level")


@dataclass
class Stage:
    anchors: np.ndarray
    parents: np.ndarray | None  # item ids; None for stages without a parent context
    net: int


@dataclass
class CodingPlan:
    stages: list[Stage]
    n_anchors: int

    @property
    def n_items(self) -> int:
        return sum(len(s.anchors) for s in self.stages)

    def starts(self) -> list[int]:
        out, pos = [], 0
        for s in self.stages:
            out.append(pos)
            pos += len(s.anchors)
        return out

    @property
    def n_nets(self) -> int:
        return max((s.net for s in self.stages), default=-1) + 1


def full_plan(part: LevelPartition) -> CodingPlan:
    """Each anchor coded once, on its own level, conditioned on its parent."""
    n = len(part.level_of)
    item_of = np.full(n, -1, dtype=np.int64)
    stages, pos = [], 0
    for k in range(part.levels - 1, -1, -1):
        anchors = part.members(k)
        parents = None
        if k < part.levels - 1:
            parents = item_of[part.parent_of[anchors]]
            if (parents < 0).any():
                raise ValueError("parent coded after child")
        item_of[anchors] = np.arange(pos, pos + len(anchors))
        pos += len(anchors)
        stages.append(Stage(anchors, parents, k))
    return CodingPlan(stages, n)


def redundant_plan(part: LevelPartition) -> CodingPlan:
    """Anchor forward disabled: level k codes every anchor of the cumulative set.

    An anchor that survives to a coarser level is coded again at every finer
    level; its context parent there is its own coarser copy.
    """
    n = len(part.level_of)
    stages, pos = [], 0
    prev_item = None
    for k in range(part.levels - 1, -1, -1):
        anchors = part.hat_members(k)
        parents = None
        if k < part.levels - 1:
            host = np.where(part.level_of[anchors] > k, anchors, part.parent_of[anchors])
            parents = prev_item[host]
        item = np.full(n, -1, dtype=np.int64)
        item[anchors] = np.arange(pos, pos + len(anchors))
        pos += len(anchors)
        prev_item = item
        stages.append(Stage(anchors, parents, k))
    return CodingPlan(stages, n)


def single_plan(n_anchors: int) -> CodingPlan:
    """One stage, position-only context (equivalent to a single level)."""
    return CodingPlan([Stage(np.arange(n_anchors, dtype=np.int64), None, 0)], n_anchors)
