"""Pairwise block dependency and per-layer direction/magnitude metrics.

M[i, j] is the mean per-token cosine distance between block j's contribution
in the intact model and its contribution when block i is skipped. Only j > i is
ever computed; the rest of the matrix is zero.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .model import Model, _as_emb, block_forward

COS_EPS = 1e-12


def cosine_distance(a, b, eps: float = COS_EPS) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    return float(rowwise_cosine_distance(a[None, :], b[None, :], eps)[0])


def rowwise_cosine_distance(A: np.ndarray, B: np.ndarray, eps: float = COS_EPS) -> np.ndarray:
    """Cosine distance between matching rows, clipped to [0, 2].

    Two sub-eps rows are at distance 0; exactly one sub-eps row gives 1.
    Bitwise-equal rows are at distance exactly 0.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise InvalidArgumentError(f"shape mismatch: {A.shape} vs {B.shape}")
    na = np.sqrt(np.einsum("nd,nd->n", A, A))
    nb = np.sqrt(np.einsum("nd,nd->n", B, B))
    dots = np.einsum("nd,nd->n", A, B)
    dist = 1.0 - dots / (np.maximum(na, eps) * np.maximum(nb, eps))
    dist = np.clip(dist, 0.0, 2.0)
    dist = np.where(np.all(A == B, axis=1), 0.0, dist)
    small_a, small_b = na < eps, nb < eps
    dist = np.where(small_a & small_b, 0.0, dist)
    return np.where(small_a ^ small_b, 1.0, dist)


def _check_inputs(model: Model, data: Sequence) -> list[np.ndarray]:
    if len(data) == 0:
        raise InvalidArgumentError("calibration set is empty")
    if not model.is_sequential():
        raise InvalidArgumentError("dependency analysis needs a model with singleton stages")
    return [_as_emb(X, model.d_e, np.float64) for X in data]


def _contributions(model: Model, X: np.ndarray, skip: int = -1, start: int = 0):
    """Inputs and contributions of blocks start..m-1, treating block ``skip`` as identity."""
    inputs, contribs = [], []
    for j in range(start, model.m):
        if j == skip:
            h = np.zeros_like(X)
        else:
            h = block_forward(X, model.blocks[j]) - X
        inputs.append(X)
        contribs.append(h)
        X = X + h
    return inputs, contribs


def _dependency_row(model: Model, samples, baselines, i: int) -> np.ndarray:
    m = model.m
    row = np.zeros(m)
    for X_in, h_base in zip(samples, baselines):
        # blocks before i see unchanged inputs, so restart from block i's input
        _, h_drop = _contributions(model, X_in[i], skip=i, start=i)
        for j in range(i + 1, m):
            row[j] += rowwise_cosine_distance(h_base[j], h_drop[j - i]).mean()
    return row / len(samples)


def compute_dependency_matrix(model: Model, data: Sequence, workers: int = 1) -> np.ndarray:
    """m x m dependency matrix; row i is the dropped block, column j the observed one.

    Rows are independent and may be computed on ``workers`` threads; each row
    accumulates samples in order, so the result does not depend on ``workers``.
    """
    samples = _check_inputs(model, data)
    m = model.m
    base_inputs, base_contribs = [], []
    for X in samples:
        inp, h = _contributions(model, X)
        base_inputs.append(inp)
        base_contribs.append(h)

    def row(i):
        return _dependency_row(model, base_inputs, base_contribs, i)

    M = np.zeros((m, m))
    if workers > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, range(m)))
    else:
        rows = [row(i) for i in range(m)]
    for i, r in enumerate(rows):
        M[i] = r
    return M


def direction_metric_from_trace(inputs, contributions) -> np.ndarray:
    """Per block: mean per-token cosine distance between X and f(X) = X + h."""
    return np.array(
        [rowwise_cosine_distance(X, X + h).mean() for X, h in zip(inputs, contributions)]
    )


def contribution_ratio_from_trace(inputs, contributions, eps: float = COS_EPS) -> np.ndarray:
    """Per block: mean per-token ||h|| / ||X||."""
    out = []
    for X, h in zip(inputs, contributions):
        hn = np.sqrt(np.einsum("nd,nd->n", h, h))
        xn = np.sqrt(np.einsum("nd,nd->n", X, X))
        out.append((hn / np.maximum(xn, eps)).mean())
    return np.array(out)


def _layer_metric(model: Model, data: Sequence, per_trace) -> np.ndarray:
    samples = _check_inputs(model, data)
    total = np.zeros(model.m)
    for X in samples:
        inputs, contribs = _contributions(model, X)
        total += per_trace(inputs, contribs)
    return total / len(samples)


def layer_direction_metric(model: Model, data: Sequence) -> np.ndarray:
    return _layer_metric(model, data, direction_metric_from_trace)


def layer_contribution_ratio(model: Model, data: Sequence) -> np.ndarray:
    return _layer_metric(model, data, contribution_ratio_from_trace)
