"""Full-block parallelization: window statistics over a dependency matrix, the
greedy window selector, and regrouping a model's stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidPlanError
from .model import Model, model_from_blocks


@dataclass(frozen=True)
class WindowStats:
    start: int
    width: int
    m_max: float
    m_sum: float

    @property
    def key(self) -> tuple[float, float, int]:
        return (self.m_max, self.m_sum, self.start)


@dataclass
class ParallelPlan:
    """Disjoint inclusive block ranges, each run as one shared-input stage."""

    ranges: list[tuple[int, int]] = field(default_factory=list)
    w: int = 4

    def __post_init__(self):
        self.ranges = [(int(a), int(b)) for a, b in self.ranges]

    def to_text(self) -> str:
        lines = [f"kind=parallel w={self.w}"] + [f"{a} {b}" for a, b in self.ranges]
        return "\n".join(lines) + "\n"


def window_stats(M, i: int, w: int) -> WindowStats:
    M = np.asarray(M)
    if w < 1 or i < 0 or i + w > M.shape[0]:
        raise InvalidArgumentError(f"window [{i}, {i + w}) does not fit a {M.shape[0]}-block matrix")
    sub = M[i : i + w, i : i + w]
    return WindowStats(i, w, float(sub.max()), float(sub.sum()))


def greedy_select(M, eligible: Sequence[bool], w: int = 4) -> ParallelPlan:
    """Pick low-dependency windows of ``w`` eligible blocks until none are left.

    Each round takes the smallest max entry, then the smallest sum, then the
    lowest start, and drops every candidate overlapping the pick. Windows are
    returned in selection order.
    """
    if w < 1:
        raise InvalidArgumentError("window width must be >= 1")
    M = np.asarray(M)
    m = M.shape[0]
    if len(eligible) != m:
        raise InvalidArgumentError("eligibility vector length must match the matrix")

    candidates = [
        window_stats(M, i, w) for i in range(m - w + 1) if all(eligible[i : i + w])
    ]
    chosen = []
    while candidates:
        best_max = min(c.m_max for c in candidates)
        tied = [c for c in candidates if c.m_max == best_max]
        best_sum = min(c.m_sum for c in tied)
        pick = min((c for c in tied if c.m_sum == best_sum), key=lambda c: c.start)
        chosen.append((pick.start, pick.start + w - 1))
        candidates = [
            c for c in candidates if c.start + w <= pick.start or c.start >= pick.start + w
        ]
    return ParallelPlan(chosen, w)


def attention_eligibility(model: Model) -> list[bool]:
    return [b.has_attention for b in model.blocks]


def apply_block_parallel_plan(model: Model, plan: ParallelPlan) -> Model:
    """Rebuild stages: each range becomes one stage, every other block its own stage.

    Weights are shared with the input model, not copied.
    """
    if not plan.ranges:
        return model_from_blocks(model, model.blocks, model.stages)
    ranges = sorted(plan.ranges)
    prev_end = -1
    for a, b in ranges:
        if not 0 <= a <= b < model.m:
            raise InvalidPlanError(f"range [{a}, {b}] is out of bounds for {model.m} blocks")
        if a <= prev_end:
            raise InvalidPlanError("parallel ranges overlap")
        prev_end = b
    starts = dict(ranges)
    stages = []
    j = 0
    while j < model.m:
        end = starts.get(j, j)
        stages.append(list(range(j, end + 1)))
        j = end + 1
    return model_from_blocks(model, model.blocks, stages)
