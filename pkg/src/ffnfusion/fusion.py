"""FFN fusion: parallel evaluation of attention-removed runs, weight concatenation,
plan construction, and the ablation transforms (removal, reversal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateScaleError, InvalidArgumentError, InvalidPlanError
from .model import (
    Block,
    FfnWeights,
    Model,
    NormScale,
    _as_emb,
    block_forward,
    merge_contributions,
    model_from_blocks,
    swiglu_forward,
    token_normalize,
)

SCALE_MODES = ("literal", "folded")


@dataclass
class FusionPlan:
    """Inclusive ``(start, end)`` block ranges to fuse, each at least two blocks long."""

    ranges: list[tuple[int, int]] = field(default_factory=list)
    exclude_last: bool = False
    scale_mode: str = "literal"

    def __post_init__(self):
        self.ranges = [(int(a), int(b)) for a, b in self.ranges]
        if self.scale_mode not in SCALE_MODES:
            raise InvalidPlanError(f"scale_mode must be one of {SCALE_MODES}")
        prev_end = -1
        for a, b in self.ranges:
            if b - a < 1:
                raise InvalidPlanError(f"range [{a}, {b}] is shorter than two blocks")
            if a <= prev_end:
                raise InvalidPlanError("fusion ranges must be ascending and non-overlapping")
            prev_end = b

    def to_text(self) -> str:
        lines = [f"exclude_last={int(self.exclude_last)} scale_mode={self.scale_mode}"]
        lines += [f"{a} {b}" for a, b in self.ranges]
        return "\n".join(lines) + "\n"


def _check_fusible(blocks: Sequence[Block]) -> None:
    if not blocks:
        raise InvalidArgumentError("need at least one block")
    for b in blocks:
        if not b.attention_removed_ffn:
            raise InvalidArgumentError("every block must be attention-removed and carry an FFN")


def parallel_ffn_forward(X, blocks: Sequence[Block], scale_mode: str = "literal") -> np.ndarray:
    """X + sum_j FFN_j(eta(X)) over a run of attention-removed blocks.

    ``literal`` normalizes once with the last block's scale for every term;
    ``folded`` gives each FFN its own block's scale.
    """
    _check_fusible(blocks)
    if scale_mode not in SCALE_MODES:
        raise InvalidArgumentError(f"scale_mode must be one of {SCALE_MODES}")
    X = np.asarray(X)
    if scale_mode == "literal":
        Xn = token_normalize(X, blocks[-1].norm2)
        terms = [swiglu_forward(Xn, b.ffn) for b in blocks]
    else:
        terms = [swiglu_forward(token_normalize(X, b.norm2), b.ffn) for b in blocks]
    return merge_contributions(X, terms)


def fuse_ffn_weights(
    ffns: Sequence[FfnWeights],
    scales: Optional[Sequence[NormScale]] = None,
    target: Optional[NormScale] = None,
) -> FfnWeights:
    """Stack FFNs into one wide FFN whose output is the sum of the inputs' outputs.

    W1 and W2 are stacked along the hidden (row) axis and W3 along its column
    axis, so hidden widths may differ. Passing ``scales`` and ``target`` folds
    each FFN's own norm scale into its W1/W2 columns so that the fused layer,
    fed input normalized with ``target``, reproduces every constituent under
    its own scale.
    """
    if not ffns:
        raise InvalidArgumentError("need at least one FFN to fuse")
    d_e = ffns[0].d_e
    if any(f.d_e != d_e for f in ffns):
        raise InvalidArgumentError("all FFNs must share d_e")
    if (scales is None) != (target is None):
        raise InvalidArgumentError("scales and target must be given together")
    if len(ffns) == 1 and scales is None:
        return ffns[0]

    w1s = [f.w1 for f in ffns]
    w2s = [f.w2 for f in ffns]
    if scales is not None:
        if len(scales) != len(ffns):
            raise InvalidArgumentError("one scale per FFN is required")
        t = target.s
        zero = t == 0
        ratios = []
        for s in scales:
            if s.s.shape != t.shape:
                raise InvalidArgumentError("scale length does not match d_e")
            if np.any(zero & (s.s != 0)):
                raise DegenerateScaleError("target scale has a zero channel that a folded scale needs")
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios.append(np.where(zero, 0.0, s.s / np.where(zero, 1, t)).astype(s.s.dtype))
        # W diag(s_j / s_t): scale the d_e columns
        w1s = [w * r for w, r in zip(w1s, ratios)]
        w2s = [w * r for w, r in zip(w2s, ratios)]

    return FfnWeights(
        np.concatenate(w1s, axis=0),
        np.concatenate(w2s, axis=0),
        np.concatenate([f.w3 for f in ffns], axis=1),
    )


def attention_removed_runs(model: Model) -> list[tuple[int, int]]:
    """Maximal inclusive runs of consecutive attention-removed FFN blocks."""
    runs = []
    start = None
    for j, b in enumerate(model.blocks):
        if b.attention_removed_ffn:
            if start is None:
                start = j
        elif start is not None:
            runs.append((start, j - 1))
            start = None
    if start is not None:
        runs.append((start, model.m - 1))
    return runs


def plan_ffn_fusion(
    model: Model, max_fused_hidden: int, exclude_last: bool = False, scale_mode: str = "literal"
) -> FusionPlan:
    if max_fused_hidden < 1:
        raise InvalidArgumentError("max_fused_hidden must be positive")
    ranges = []
    for start, end in attention_removed_runs(model):
        if exclude_last:
            end -= 1
        widest = max((model.blocks[j].ffn_hidden for j in range(start, end + 1)), default=0)
        if widest > max_fused_hidden:
            raise InvalidArgumentError(
                f"block of width {widest} exceeds max_fused_hidden={max_fused_hidden}"
            )
        j = start
        while j <= end:
            total = 0
            k = j
            while k <= end and total + model.blocks[k].ffn_hidden <= max_fused_hidden:
                total += model.blocks[k].ffn_hidden
                k += 1
            if k - j >= 2:
                ranges.append((j, k - 1))
            j = k
    return FusionPlan(ranges, exclude_last=exclude_last, scale_mode=scale_mode)


def _validate_plan_ranges(model: Model, ranges) -> None:
    prev_end = -1
    for a, b in ranges:
        if not 0 <= a < b < model.m:
            raise InvalidPlanError(f"range [{a}, {b}] is out of bounds for {model.m} blocks")
        if a <= prev_end:
            raise InvalidPlanError("ranges overlap or are not ascending")
        prev_end = b
        for j in range(a, b + 1):
            if not model.blocks[j].attention_removed_ffn:
                raise InvalidPlanError(f"block {j} is not an attention-removed FFN block")


def apply_fusion_plan(model: Model, plan: FusionPlan) -> Model:
    """Replace every planned range by one wide attention-removed block.

    The fused block keeps the last constituent's norm2; stages come back as
    singletons.
    """
    _validate_plan_ranges(model, plan.ranges)
    starts = {a: b for a, b in plan.ranges}
    blocks = []
    j = 0
    while j < model.m:
        if j in starts:
            run = model.blocks[j : starts[j] + 1]
            last = run[-1].norm2
            if plan.scale_mode == "folded":
                ffn = fuse_ffn_weights([b.ffn for b in run], [b.norm2 for b in run], last)
            else:
                ffn = fuse_ffn_weights([b.ffn for b in run])
            blocks.append(Block(norm2=NormScale(last.s.copy(), last.epsilon), ffn=ffn))
            j = starts[j] + 1
        else:
            blocks.append(model.blocks[j])
            j += 1
    return model_from_blocks(model, blocks)


def parallel_reference_forward(model: Model, plan: FusionPlan, X) -> np.ndarray:
    """Forward of the unfused model with each planned range run as a parallel FFN group.

    This is the value a correctly fused model must reproduce.
    """
    _validate_plan_ranges(model, plan.ranges)
    X = _as_emb(X, model.d_e, model.dtype)
    starts = {a: b for a, b in plan.ranges}
    j = 0
    while j < model.m:
        if j in starts:
            run = model.blocks[j : starts[j] + 1]
            f = parallel_ffn_forward(X, run, plan.scale_mode)
            j = starts[j] + 1
        else:
            f = block_forward(X, model.blocks[j])
            j += 1
        X = X + (f - X)
    return X


def max_relative_error(got, ref) -> float:
    """max |got - ref| over all entries, relative to max |ref|."""
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.max(np.abs(ref))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(got - ref))) / scale


def remove_ffns(model: Model, indices: Sequence[int]) -> Model:
    """Drop the FFN (and its norm) at each index; block positions stay put."""
    drop = set()
    for j in indices:
        if not 0 <= j < model.m or model.blocks[j].ffn is None:
            raise InvalidArgumentError(f"block {j} has no FFN to remove")
        drop.add(j)
    blocks = [
        Block(norm1=b.norm1, attn=b.attn) if j in drop else b for j, b in enumerate(model.blocks)
    ]
    return model_from_blocks(model, blocks, model.stages)


def reverse_ffn_range(model: Model, start: int, end: int) -> Model:
    if not 0 <= start <= end < model.m:
        raise InvalidArgumentError(f"range [{start}, {end}] is out of bounds")
    for j in range(start, end + 1):
        if not model.blocks[j].attention_removed_ffn:
            raise InvalidArgumentError(f"block {j} is not an attention-removed FFN block")
    blocks = list(model.blocks)
    blocks[start : end + 1] = blocks[start : end + 1][::-1]
    return model_from_blocks(model, blocks, model.stages)
