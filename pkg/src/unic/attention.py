"""Multi-head attention, AdaLayerNormZero modulation, and feed-forward nets.

These are the shared sublayers of every transformer block in the package.
Attention is full (no masking); scores are scaled by 1/sqrt(head_dim);
rotary rotation, when requested, is applied per head to queries and keys
before the score product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embeddings import RotaryTable, TokenSeq, rope_rotate_seq
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class MultiHeadSpec:
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.head_dim % 4 != 0:
            raise ValueError(f"head_dim must be divisible by 4, got {self.head_dim}")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


class Linear:
    """Affine map dim_in -> dim_out stored as (in, out) weight plus bias."""

    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight.tensor, self.bias.tensor)

    @property
    def params(self):
        return (self.weight, self.bias)


@dataclass
class ProjectionSet:
    """Per-stream q/k/v/out maps for one block."""

    q: Linear
    k: Linear
    v: Linear
    out: Linear

    @property
    def params(self):
        return self.q.params + self.k.params + self.v.params + self.out.params


@dataclass
class AdaLNZeroParams:
    """Conditioning -> (shift, scale, gate) for attention and feed-forward.

    The modulation map emits six chunks of model dim in the order
    (shift_attn, scale_attn, gate_attn, shift_ff, scale_ff, gate_ff).
    """

    mod: Linear

    @property
    def params(self):
        return self.mod.params


@dataclass
class FeedForwardParams:
    fc1: Linear
    fc2: Linear

    @property
    def params(self):
        return self.fc1.params + self.fc2.params


def _split_heads(x: Tensor, spec: MultiHeadSpec) -> Tensor:
    """(..., S, dim) -> (..., heads, S, head_dim)."""
    lead = x.shape[:-2]
    n = len(lead)
    s = x.shape[-2]
    x = T.reshape(x, lead + (s, spec.heads, spec.head_dim))
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor, spec: MultiHeadSpec) -> Tensor:
    """(..., heads, S, head_dim) -> (..., S, dim)."""
    lead = x.shape[:-3]
    n = len(lead)
    s = x.shape[-2]
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    x = T.transpose(x, axes)
    return T.reshape(x, lead + (s, spec.heads * spec.head_dim))


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    spec: MultiHeadSpec,
    rope: RotaryTable | None = None,
    q_positions: np.ndarray | None = None,
    k_positions: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention on projected features.

    q/k/v are (..., S, dim); the output is the heads-concatenated context
    (..., S_q, dim) with no output projection applied.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    qh = _split_heads(q, spec)
    kh = _split_heads(k, spec)
    vh = _split_heads(v, spec)
    if rope is not None:
        qh = rope_rotate_seq(qh, q_positions, rope)
        kh = rope_rotate_seq(kh, k_positions, rope)
    # fold the score scaling into q: cheaper than scaling the S_q x S_k scores
    qh = T.mul(qh, 1.0 / math.sqrt(spec.head_dim))
    weights = T.attention_weights(qh, kh)
    ctx = T.matmul(weights, vh)
    return _merge_heads(ctx, spec)


def multi_head_attention(
    q_seq: TokenSeq,
    k_seq: TokenSeq,
    v_seq: TokenSeq,
    spec: MultiHeadSpec,
    out: Linear | None = None,
    rope: RotaryTable | None = None,
) -> Tensor:
    """Attention over already-projected token streams.

    Rotary rotation uses the positions carried by the query and key
    sequences. ``out`` is the final output projection; pass None to get
    the raw heads-concatenated context.
    """
    ctx = attention_core(
        q_seq.tokens,
        k_seq.tokens,
        v_seq.tokens,
        spec,
        rope=rope,
        q_positions=q_seq.positions,
        k_positions=k_seq.positions,
    )
    return out(ctx) if out is not None else ctx


def ada_ln_zero(x: Tensor, cond: Tensor, params: AdaLNZeroParams, sublayer: str = "attn"):
    """Modulated layer norm: returns (norm(x) * (1 + scale) + shift, gate).

    ``cond`` is (..., dim) and broadcasts over the sequence axis of x.
    ``sublayer`` selects the attention or feed-forward chunk triplet.
    """
    if sublayer not in ("attn", "ff"):
        raise ValueError(f"unknown sublayer {sublayer!r}")
    dim = x.shape[-1]
    mod = params.mod(cond)
    base = 0 if sublayer == "attn" else 3 * dim
    shift = T.narrow(mod, -1, base, dim)
    scale = T.narrow(mod, -1, base + dim, dim)
    gate = T.narrow(mod, -1, base + 2 * dim, dim)
    if x.ndim == cond.ndim + 1:
        # broadcast (..., dim) over (..., S, dim)
        shape = shift.shape[:-1] + (1, dim)
        shift = T.reshape(shift, shape)
        scale = T.reshape(scale, shape)
        gate = T.reshape(gate, shape)
    h = T.add(T.mul(T.layer_norm(x), T.add(scale, 1.0)), shift)
    return h, gate


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    """Position-wise MLP: linear -> GELU -> linear, hidden dim 4x model dim."""
    return params.fc2(T.gelu(params.fc1(x)))
