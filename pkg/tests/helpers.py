import struct

import numpy as np

from ffnfusion import BlockSpec, ModelConfig, generate_random_model


def make_model(specs, d_e=8, n_heads=2, head_dim=4, seed=0, dtype="f64"):
    """specs: list of (has_attention, ffn_hidden)."""
    config = ModelConfig(d_e, n_heads, head_dim, [BlockSpec(a, h) for a, h in specs], dtype)
    return generate_random_model(config, seed)


def ref_swiglu(X, w1, w2, w3):
    """Textbook SwiGLU via plain matmuls; independent of the einsum path in the package."""
    gate = X @ w2.T
    return ((gate / (1.0 + np.exp(-gate))) * (X @ w1.T)) @ w3.T


def ref_normalize(X, s, eps=1e-12):
    out = np.empty_like(X)
    for i, row in enumerate(X):
        out[i] = row / max(np.linalg.norm(row), eps) * s
    return out


def fold_blocks(X, blocks, block_forward):
    for b in blocks:
        X = block_forward(X, b)
    return X


def ref_cosine(a, b, eps=1e-12):
    na, nb = float(np.sqrt(np.dot(a, a))), float(np.sqrt(np.dot(b, b)))
    if na < eps and nb < eps:
        return 0.0
    if na < eps or nb < eps:
        return 1.0
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def brute_force_dependency(model, samples, block_forward):
    """Recompute every M[i, j] from two fresh forwards, sharing nothing between pairs."""
    m = model.m

    def contribution_at(X, j, skip):
        for k in range(j + 1):
            if k == skip:
                continue
            h = block_forward(X, model.blocks[k]) - X
            if k == j:
                return h
            X = X + h

    M = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            per_sample = []
            for X in samples:
                base = contribution_at(X, j, skip=None)
                dropped = contribution_at(X, j, skip=i)
                per_sample.append(np.mean([ref_cosine(a, b) for a, b in zip(base, dropped)]))
            M[i, j] = np.mean(per_sample)
    return M


def silence_block(block):
    """Zero the output projections so the block contributes exactly nothing."""
    if block.attn is not None:
        block.attn.wo[:] = 0.0
    if block.ffn is not None:
        block.ffn.w3[:] = 0.0


def tensor_region(data: bytes) -> bytes:
    """Checkpoint bytes after the JSON header."""
    _, _, config_len = struct.unpack_from("<4sIQ", data)
    return data[16 + config_len :]
