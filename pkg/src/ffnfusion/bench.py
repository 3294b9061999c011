"""Latency evaluation: an analytic tensor-parallel cost model and a threaded
wall-clock harness that runs a model's stages behind a barrier.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .dependency import COS_EPS
from .errors import InvalidArgumentError
from .model import (
    Model,
    _as_emb,
    block_forward,
    ffn_hidden_activation,
    merge_contributions,
    model_forward,
    token_normalize,
)


@dataclass(frozen=True)
class LatencyParams:
    """Cost-model constants. The defaults are only meant for relative comparisons."""

    g: int = 8
    t_sync: float = 1e-4
    w_wave: float = 1e6
    t_tile: float = 1e-5
    n: int = 1

    def __post_init__(self):
        if self.g < 1 or self.n < 1:
            raise InvalidArgumentError("g and n must be >= 1")
        if self.t_sync < 0 or not self.w_wave > 0 or not self.t_tile > 0:
            raise InvalidArgumentError("need t_sync >= 0, w_wave > 0, t_tile > 0")

    @classmethod
    def from_string(cls, text: str) -> "LatencyParams":
        """Parse ``k=v,k=v``; unknown keys are rejected."""
        kwargs = {}
        types = {"g": int, "n": int, "t_sync": float, "w_wave": float, "t_tile": float}
        for item in filter(None, (t.strip() for t in text.split(","))):
            key, _, value = item.partition("=")
            if key not in types:
                raise InvalidArgumentError(f"unknown latency parameter {key!r}")
            try:
                kwargs[key] = types[key](value)
            except ValueError as exc:
                raise InvalidArgumentError(f"bad value for {key}: {value!r}") from exc
        return cls(**kwargs)


@dataclass
class BenchReport:
    stage_seconds: list[float]
    stage_flops: list[int]
    n: int
    output: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return sum(self.stage_seconds)

    @property
    def tokens_per_second(self) -> float:
        return self.n / self.total if self.total > 0 else math.inf

    @property
    def stage_count(self) -> int:
        return len(self.stage_seconds)

    @property
    def sync_count(self) -> int:
        return len(self.stage_seconds)

    def summary(self) -> str:
        return f"total={self.total:.17g} tokens_per_second={self.tokens_per_second:.17g} stages={self.stage_count}"

    def to_csv(self) -> str:
        rows = [
            f"{k},{flops},{secs:.17g}"
            for k, (flops, secs) in enumerate(zip(self.stage_flops, self.stage_seconds))
        ]
        return "\n".join(rows + [self.summary()]) + "\n"


def stage_flops(model: Model, stage, n: int) -> int:
    """Dense GEMM flop count (2 per MAC) of one stage for ``n`` tokens."""
    total = 0
    d_e = model.d_e
    for j in stage:
        b = model.blocks[j]
        if b.ffn is not None:
            total += 6 * n * d_e * b.ffn.d_h
        if b.attn is not None:
            width = b.attn.n_heads * b.attn.head_dim
            total += 8 * n * d_e * width + 4 * n * n * width
    return total


def _waves(flops: int, g: int, w_wave: float) -> int:
    # exact rational ceil; a float quotient can land just above an integer
    return math.ceil(Fraction(flops) / (g * Fraction(w_wave)))


def analytic_latency(model: Model, p: LatencyParams) -> BenchReport:
    """Per stage: t_tile * ceil(flops / g / w_wave) + t_sync."""
    flops = [stage_flops(model, s, p.n) for s in model.stages]
    seconds = [p.t_tile * _waves(f, p.g, p.w_wave) + p.t_sync for f in flops]
    return BenchReport(seconds, flops, p.n)


def busy_wait(seconds: float) -> None:
    if seconds <= 0:
        return
    end = time.perf_counter() + seconds
    while time.perf_counter() < end:
        pass


class StagePool:
    """Fixed set of worker threads that execute one stage's task list per round.

    The caller and the workers meet at a start barrier, tasks are taken
    round-robin by worker rank, and everybody meets again at an end barrier
    before the caller merges results.
    """

    def __init__(self, workers: int):
        if workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        self.workers = workers
        self._start = threading.Barrier(workers + 1)
        self._done = threading.Barrier(workers + 1)
        self._tasks: list[Callable] = []
        self._results: list = []
        self._stop = False
        self._threads = [
            threading.Thread(target=self._loop, args=(rank,), daemon=True) for rank in range(workers)
        ]
        for t in self._threads:
            t.start()

    def _loop(self, rank: int) -> None:
        while True:
            self._start.wait()
            if self._stop:
                return
            for k in range(rank, len(self._tasks), self.workers):
                try:
                    self._results[k] = (True, self._tasks[k]())
                except BaseException as exc:  # re-raised on the calling thread
                    self._results[k] = (False, exc)
            self._done.wait()

    def run(self, tasks: list[Callable]) -> list:
        self._tasks = tasks
        self._results = [None] * len(tasks)
        self._start.wait()
        self._done.wait()
        out = []
        for ok, value in self._results:
            if not ok:
                raise value
            out.append(value)
        return out

    def close(self) -> None:
        if not self._stop:
            self._stop = True
            self._start.wait()
            for t in self._threads:
                t.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _shard_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, size))
    base, extra = divmod(size, parts)
    bounds, start = [], 0
    for k in range(parts):
        stop = start + base + (1 if k < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def _stage_tasks(model: Model, stage, X: np.ndarray, workers: int):
    """Task list plus, per block, a finisher turning its task results into a contribution."""
    tasks, finishers = [], []
    for j in stage:
        b = model.blocks[j]
        if workers > 1 and b.attention_removed_ffn and b.ffn.d_h > 1:
            Xn = token_normalize(X, b.norm2)
            first = len(tasks)
            for lo, hi in _shard_bounds(b.ffn.d_h, workers):
                tasks.append(lambda Xn=Xn, ffn=b.ffn, rows=slice(lo, hi): ffn_hidden_activation(Xn, ffn, rows))
            last = len(tasks)

            def finish(results, first=first, last=last, ffn=b.ffn):
                hidden = np.concatenate(results[first:last], axis=1)
                return (X + hidden @ ffn.w3.T) - X

            finishers.append(finish)
        else:
            k = len(tasks)
            tasks.append(lambda b=b: block_forward(X, b) - X)
            finishers.append(lambda results, k=k: results[k])
    return tasks, finishers


def wall_clock_bench(model: Model, X, workers: int = 1, injected_sync_cost: float = 0.0) -> BenchReport:
    """Time a forward pass with each stage dispatched to ``workers`` threads.

    Blocks of a stage run concurrently and attention-removed FFNs are further
    split into hidden-dimension shards. Results merge in ascending block and
    shard order, so ``report.output`` is bit-identical to ``model_forward``.
    Each stage barrier is followed by a busy-wait of ``injected_sync_cost``
    seconds standing in for an all-reduce.
    """
    X = _as_emb(X, model.d_e, model.dtype)
    n = X.shape[0]
    seconds, flops = [], []
    with StagePool(workers) as pool:
        for stage in model.stages:
            t0 = time.perf_counter()
            tasks, finishers = _stage_tasks(model, stage, X, workers)
            results = pool.run(tasks)
            X = merge_contributions(X, [fin(results) for fin in finishers])
            busy_wait(injected_sync_cost)
            seconds.append(time.perf_counter() - t0)
            flops.append(stage_flops(model, stage, n))
    return BenchReport(seconds, flops, n, output=X)


def output_divergence(a: np.ndarray, b: np.ndarray) -> float:
    """Max over tokens of ||a_t - b_t|| / ||a_t||."""
    diff = np.sqrt(np.einsum("nd,nd->n", a - b, a - b))
    ref = np.sqrt(np.einsum("nd,nd->n", a, a))
    return float(np.max(diff / np.maximum(ref, COS_EPS)))


@dataclass
class ModelComparison:
    analytic_a: BenchReport
    analytic_b: BenchReport
    wall_a: BenchReport
    wall_b: BenchReport
    divergence: float


def compare_models(
    a: Model, b: Model, X, p: LatencyParams, workers: int = 1, injected_sync_cost: float = 0.0
) -> ModelComparison:
    if a.d_e != b.d_e:
        raise InvalidArgumentError(f"d_e mismatch: {a.d_e} vs {b.d_e}")
    ya, _ = model_forward(a, X)
    yb, _ = model_forward(b, X)
    return ModelComparison(
        analytic_latency(a, p),
        analytic_latency(b, p),
        wall_clock_bench(a, X, workers, injected_sync_cost),
        wall_clock_bench(b, X, workers, injected_sync_cost),
        output_divergence(np.asarray(ya, dtype=np.float64), np.asarray(yb, dtype=np.float64)),
    )
