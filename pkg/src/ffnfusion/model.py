"""Desk-scale transformer arithmetic.

Everything here maps embedding space to embedding space: a model is an ordered
list of pre-norm blocks (optional causal attention, optional SwiGLU FFN) plus a
stage plan saying which blocks share an input and have their contributions
summed. Arrays are plain numpy; a token is one row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .rng import SplitMix64

NORM_EPS = 1e-12
MAX_ATTENTION_WIDTH = 1 << 16

DTYPES = {"f64": np.float64, "f32": np.float32}


def dtype_tag(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in DTYPES.items():
        if dtype == dt:
            return tag
    raise InvalidArgumentError(f"unsupported dtype {dtype}")


@dataclass
class NormScale:
    s: np.ndarray
    epsilon: float = NORM_EPS

    def __post_init__(self):
        if self.s.ndim != 1:
            raise InvalidArgumentError("norm scale must be a vector")
        if not self.epsilon > 0:
            raise InvalidArgumentError("norm epsilon must be positive")


@dataclass
class FfnWeights:
    """SwiGLU weights: gate and up projections ``w1``/``w2`` (d_h, d_e), down projection ``w3`` (d_e, d_h)."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w1.shape != self.w2.shape:
            raise InvalidArgumentError(
                f"W1 {self.w1.shape} and W2 {self.w2.shape} must share a (d_h, d_e) shape"
            )
        d_h, d_e = self.w1.shape
        if d_h < 1:
            raise InvalidArgumentError("FFN hidden dimension must be >= 1")
        if self.w3.shape != (d_e, d_h):
            raise InvalidArgumentError(f"W3 must have shape {(d_e, d_h)}, got {self.w3.shape}")

    @property
    def d_h(self) -> int:
        return self.w1.shape[0]

    @property
    def d_e(self) -> int:
        return self.w1.shape[1]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.w2.size + self.w3.size


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int
    head_dim: int

    def __post_init__(self):
        width = self.n_heads * self.head_dim
        if self.n_heads < 1 or self.head_dim < 1:
            raise InvalidArgumentError("n_heads and head_dim must be positive")
        d_e = self.wq.shape[1] if self.wq.ndim == 2 else -1
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (width, d_e):
                raise InvalidArgumentError(f"{name} must have shape {(width, d_e)}")
        if self.wo.shape != (d_e, width):
            raise InvalidArgumentError(f"wo must have shape {(d_e, width)}")

    @property
    def d_e(self) -> int:
        return self.wq.shape[1]


@dataclass
class Block:
    norm1: Optional[NormScale] = None
    attn: Optional[AttentionWeights] = None
    norm2: Optional[NormScale] = None
    ffn: Optional[FfnWeights] = None

    def __post_init__(self):
        if (self.attn is None) != (self.norm1 is None):
            raise InvalidArgumentError("norm1 must be present exactly when attention is")
        if (self.ffn is None) != (self.norm2 is None):
            raise InvalidArgumentError("norm2 must be present exactly when the FFN is")

    @property
    def has_attention(self) -> bool:
        return self.attn is not None

    @property
    def has_ffn(self) -> bool:
        return self.ffn is not None

    @property
    def attention_removed_ffn(self) -> bool:
        """True for the fusion substrate: an FFN with no attention in front of it."""
        return self.attn is None and self.ffn is not None

    @property
    def ffn_hidden(self) -> int:
        return self.ffn.d_h if self.ffn is not None else 0


@dataclass(frozen=True)
class BlockSpec:
    has_attention: bool
    ffn_hidden: int = 0


@dataclass(frozen=True)
class ModelConfig:
    d_e: int
    n_heads: int
    head_dim: int
    block_specs: tuple[BlockSpec, ...] = ()
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "block_specs", tuple(self.block_specs))
        if self.d_e < 1 or self.n_heads < 1 or self.head_dim < 1:
            raise InvalidArgumentError("d_e, n_heads and head_dim must be positive")
        if self.n_heads * self.head_dim > MAX_ATTENTION_WIDTH:
            raise InvalidArgumentError(
                f"n_heads*head_dim exceeds the maximum of {MAX_ATTENTION_WIDTH}"
            )
        if self.dtype not in DTYPES:
            raise InvalidArgumentError(f"dtype must be one of {sorted(DTYPES)}")
        for spec in self.block_specs:
            if spec.ffn_hidden < 0:
                raise InvalidArgumentError("ffn_hidden must be nonnegative")

    @property
    def m(self) -> int:
        return len(self.block_specs)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


def singleton_stages(m: int) -> list[list[int]]:
    return [[i] for i in range(m)]


def validate_stages(stages: Sequence[Sequence[int]], m: int) -> None:
    expected = 0
    for stage in stages:
        if len(stage) == 0:
            raise InvalidArgumentError("stages must be nonempty")
        for idx in stage:
            if idx != expected:
                raise InvalidArgumentError(
                    "stages must cover 0..m-1 with contiguous ascending indices"
                )
            expected += 1
    if expected != m:
        raise InvalidArgumentError(f"stages cover {expected} blocks, model has {m}")


@dataclass
class Model:
    config: ModelConfig
    blocks: list[Block]
    stages: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            self.stages = singleton_stages(len(self.blocks))
        self.stages = [list(s) for s in self.stages]
        if len(self.blocks) != self.config.m:
            raise InvalidArgumentError("block count does not match the config")
        validate_stages(self.stages, len(self.blocks))

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def d_e(self) -> int:
        return self.config.d_e

    @property
    def dtype(self):
        return self.config.np_dtype

    def is_sequential(self) -> bool:
        return all(len(s) == 1 for s in self.stages)


def model_from_blocks(like: Model, blocks: list[Block], stages=None) -> Model:
    """Build a model sharing ``like``'s geometry with the given blocks; the config is rederived."""
    specs = tuple(BlockSpec(b.has_attention, b.ffn_hidden) for b in blocks)
    config = replace(like.config, block_specs=specs)
    return Model(config, list(blocks), stages if stages is not None else singleton_stages(len(blocks)))


def _as_emb(X, d_e: int, dtype=None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidArgumentError(f"expected an (n, d_e) matrix with n >= 1, got shape {X.shape}")
    if X.shape[1] != d_e:
        raise InvalidArgumentError(f"expected {d_e} columns, got {X.shape[1]}")
    if dtype is not None:
        X = X.astype(dtype, copy=False)
    return X


def silu(x):
    """x * sigmoid(x); large negative inputs give -0.0 rather than NaN."""
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        return x * (1.0 / (1.0 + np.exp(-x)))


def token_normalize(X, scale: NormScale) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != scale.s.shape[0]:
        raise InvalidArgumentError(
            f"cannot normalize shape {X.shape} with a scale of length {scale.s.shape[0]}"
        )
    norms = np.sqrt(np.einsum("nd,nd->n", X, X))
    norms = np.maximum(norms, scale.epsilon).astype(X.dtype, copy=False)
    return (X / norms[:, None]) * scale.s.astype(X.dtype, copy=False)


def ffn_hidden_activation(Xn: np.ndarray, ffn: FfnWeights, rows: slice = slice(None)) -> np.ndarray:
    """Gated hidden activations silu(X W2^T) * (X W1^T) for a slice of hidden units.

    The projections go through einsum instead of BLAS so each hidden unit is a
    fixed-order dot product: any split of the hidden dimension reproduces the
    full computation bit for bit.
    """
    up = np.einsum("nd,hd->nh", Xn, ffn.w1[rows])
    gate = np.einsum("nd,hd->nh", Xn, ffn.w2[rows])
    return silu(gate) * up


def swiglu_forward(X, ffn: FfnWeights) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != ffn.d_e:
        raise InvalidArgumentError(f"input shape {X.shape} does not match FFN d_e={ffn.d_e}")
    return ffn_hidden_activation(X, ffn) @ ffn.w3.T


def attention_forward(X, attn: AttentionWeights) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != attn.d_e:
        raise InvalidArgumentError(f"input shape {X.shape} does not match attention d_e={attn.d_e}")
    n = X.shape[0]
    H, hd = attn.n_heads, attn.head_dim
    q = (X @ attn.wq.T).reshape(n, H, hd).transpose(1, 0, 2)
    k = (X @ attn.wk.T).reshape(n, H, hd).transpose(1, 0, 2)
    v = (X @ attn.wv.T).reshape(n, H, hd).transpose(1, 0, 2)

    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(hd)
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)

    heads = (weights @ v).transpose(1, 0, 2).reshape(n, H * hd)
    return heads @ attn.wo.T


def block_forward(X, b: Block) -> np.ndarray:
    G = np.asarray(X)
    if b.attn is not None:
        G = G + attention_forward(token_normalize(G, b.norm1), b.attn)
    if b.ffn is not None:
        return G + swiglu_forward(token_normalize(G, b.norm2), b.ffn)
    return G


@dataclass
class ForwardTrace:
    """Per executed block: its input and its contribution f(X) - X, in execution order."""

    block_indices: list[int] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    contributions: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.block_indices)

    def record(self, j: int, X: np.ndarray, h: np.ndarray) -> None:
        self.block_indices.append(j)
        self.inputs.append(X)
        self.contributions.append(h)


def merge_contributions(X: np.ndarray, contributions: Sequence[np.ndarray]) -> np.ndarray:
    """X + sum of contributions, accumulated in the given (ascending block) order."""
    if not contributions:
        return X
    total = contributions[0]
    for h in contributions[1:]:
        total = total + h
    return X + total


def model_forward(model: Model, X, capture: bool = False):
    """Run the stage plan. Returns ``(Y, trace)``; ``trace`` is None unless ``capture``."""
    X = _as_emb(X, model.d_e, model.dtype)
    trace = ForwardTrace() if capture else None
    for stage in model.stages:
        contributions = []
        for j in stage:
            h = block_forward(X, model.blocks[j]) - X
            contributions.append(h)
            if trace is not None:
                trace.record(j, X, h)
        X = merge_contributions(X, contributions)
    return X, trace


def generate_random_model(config: ModelConfig, seed: int) -> Model:
    """Fill a model from a splitmix64 stream.

    Draw order follows the checkpoint tensor order (per block: norm1, Wq, Wk,
    Wv, Wo, norm2, W1, W2, W3). Weights are uniform in [-0.5, 0.5) / sqrt(d_e)
    and norm scales uniform in [0.5, 1.5). Values are drawn in float64 and then
    cast to the config dtype.
    """
    rng = SplitMix64(seed)
    d_e = config.d_e
    width = config.n_heads * config.head_dim
    dtype = config.np_dtype
    weight_scale = 1.0 / math.sqrt(d_e)

    def weight(shape):
        return ((rng.uniform(shape) - 0.5) * weight_scale).astype(dtype)

    def norm():
        return NormScale((rng.uniform((d_e,)) + 0.5).astype(dtype))

    blocks = []
    for spec in config.block_specs:
        b = Block()
        if spec.has_attention:
            b.norm1 = norm()
            b.attn = AttentionWeights(
                weight((width, d_e)),
                weight((width, d_e)),
                weight((width, d_e)),
                weight((d_e, width)),
                config.n_heads,
                config.head_dim,
            )
        if spec.ffn_hidden > 0:
            b.norm2 = norm()
            d_h = spec.ffn_hidden
            b.ffn = FfnWeights(weight((d_h, d_e)), weight((d_h, d_e)), weight((d_e, d_h)))
        blocks.append(b)
    return Model(config, blocks)


def zero_like_model(model: Model) -> Model:
    """Same geometry, every weight matrix zeroed; norm scales kept."""
    blocks = []
    for b in model.blocks:
        nb = Block()
        if b.attn is not None:
            nb.norm1 = NormScale(b.norm1.s.copy(), b.norm1.epsilon)
            a = b.attn
            nb.attn = AttentionWeights(
                np.zeros_like(a.wq), np.zeros_like(a.wk), np.zeros_like(a.wv),
                np.zeros_like(a.wo), a.n_heads, a.head_dim,
            )
        if b.ffn is not None:
            nb.norm2 = NormScale(b.norm2.s.copy(), b.norm2.epsilon)
            f = b.ffn
            nb.ffn = FfnWeights(np.zeros_like(f.w1), np.zeros_like(f.w2), np.zeros_like(f.w3))
        blocks.append(nb)
    return Model(model.config, blocks, [list(s) for s in model.stages])
