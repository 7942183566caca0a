"""Transformer block computations.

Four block-level operations:

* ``dit_block_forward`` — one-way cross-attention: image queries over
  static text keys/values (the one-way-interaction baseline).
* ``mmdit_block_forward`` — joint attention where text and image streams
  both produce q/k/v over the concatenated sequence, with optional
  per-layer injection of adapter features.
* ``adapter_block_forward`` — the same joint structure over (instruction,
  condition) streams with rotary position rotation, emitting the layer's
  injection packet.
* ``inject_cross_attention`` — residual cross-attention from the image
  stream onto the packet's keys/values through a dedicated query map.

Every stream update is AdaLayerNormZero-modulated: the sublayer reads a
modulated input and its output is gated before the residual addition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AdaLNZeroParams,
    FeedForwardParams,
    Linear,
    MultiHeadSpec,
    ProjectionSet,
    ada_ln_zero,
    attention_core,
    feed_forward,
)
from .embeddings import RotaryTable, TokenSeq
from .tensor import Tensor


@dataclass
class StreamParams:
    """One stream's sublayer parameters inside a block."""

    adaln: AdaLNZeroParams
    proj: ProjectionSet
    ffn: FeedForwardParams

    @property
    def params(self):
        return self.adaln.params + self.proj.params + self.ffn.params


@dataclass
class MMDiTBlockParams:
    txt: StreamParams
    img: StreamParams


@dataclass
class AdapterBlockParams:
    ist: StreamParams
    con: StreamParams
    cross_q: Linear  # backbone-side query map for this layer's injection


@dataclass
class InjectionPacket:
    """Per-layer keys/values exported by the adapter for backbone injection.

    Instruction tokens precede condition tokens; positions are (0, 0)
    sentinels for instruction tokens and grid coordinates for condition
    tokens. Keys/values are stored unrotated; each attention site applies
    its own position treatment.
    """

    keys: Tensor
    values: Tensor
    positions: np.ndarray
    n_ist: int

    def __post_init__(self):
        if self.keys.shape[-2] != self.values.shape[-2]:
            raise ValueError("packet keys/values lengths differ")
        if self.positions.shape[0] != self.keys.shape[-2]:
            raise ValueError("packet positions length mismatch")

    def select(self, which: str):
        """Restrict to the instruction span, condition span, or both."""
        if which == "both":
            return self.keys, self.values, self.positions
        n = self.keys.shape[-2]
        if which == "ist":
            span = (0, self.n_ist)
        elif which == "con":
            span = (self.n_ist, n - self.n_ist)
        else:
            raise ValueError(f"unknown key selection {which!r}")
        start, length = span
        k = T.narrow(self.keys, -2, start, length)
        v = T.narrow(self.values, -2, start, length)
        return k, v, self.positions[start : start + length]


@dataclass
class InjectionSite:
    """How one backbone layer consumes its adapter packet."""

    packet: InjectionPacket
    cross_q: Linear | None
    mode: str = "cross"  # cross | add
    keys: str = "both"  # both | ist | con
    query_stream: str = "img"  # img | txt
    query_source: str = "pre"  # pre | post
    use_gate: bool = True
    rope: RotaryTable | None = None
    abs_pe: Tensor | None = None


def _maybe_add_abs_pe(x: Tensor, positions: np.ndarray, abs_pe: Tensor | None, grid_w: int):
    if abs_pe is None:
        return x
    flat = positions[:, 0] * grid_w + positions[:, 1]
    return T.add(x, T.gather_rows(abs_pe, flat))


def inject_cross_attention(
    z_img_prime: TokenSeq,
    packet: InjectionPacket,
    cross_q: Linear | None,
    spec: MultiHeadSpec,
    rope: RotaryTable | None = None,
    query_input: Tensor | None = None,
    gate: Tensor | None = None,
    keys: str = "both",
    mode: str = "cross",
    abs_pe: Tensor | None = None,
    abs_pe_grid_w: int = 0,
) -> TokenSeq:
    """Residually add packet information onto the image stream.

    ``query_input`` is the hidden the query map reads (defaults to the
    stream itself). The attention context is added bare — there is no
    output projection, so an all-zero packet value is an exact no-op.
    ``mode='add'`` replaces attention by direct grid-aligned addition of
    the condition values, ignoring instruction tokens.
    """
    z = z_img_prime.tokens
    if mode == "add":
        _, v, _ = packet.select("con")
        if v.shape[-2] != z.shape[-2]:
            raise ValueError(
                f"grid-aligned addition needs matching grids: {v.shape[-2]} vs {z.shape[-2]}"
            )
        update = v
    elif mode == "cross":
        if packet.keys.shape[-1] != z.shape[-1]:
            raise ValueError(
                f"packet dim {packet.keys.shape[-1]} != stream dim {z.shape[-1]}"
            )
        k, v, k_pos = packet.select(keys)
        q = cross_q(query_input if query_input is not None else z)
        q = _maybe_add_abs_pe(q, z_img_prime.positions, abs_pe, abs_pe_grid_w)
        k = _maybe_add_abs_pe(k, k_pos, abs_pe, abs_pe_grid_w)
        update = attention_core(
            q, k, v, spec, rope=rope, q_positions=z_img_prime.positions, k_positions=k_pos
        )
    else:
        raise ValueError(f"unknown injection mode {mode!r}")
    if gate is not None:
        update = T.mul(gate, update)
    return TokenSeq(T.add(z, update), z_img_prime.positions, z_img_prime.modality)


def dit_block_forward(
    z_img: TokenSeq,
    z_txt: TokenSeq,
    cond: Tensor,
    params: MMDiTBlockParams,
    spec: MultiHeadSpec,
) -> TokenSeq:
    """One-way block: image queries attend to static text keys/values.

    The text stream is conditioning only — it is projected but never
    updated. Used as the one-way-interaction baseline.
    """
    h_img, gate_attn = ada_ln_zero(z_img.tokens, cond, params.img.adaln, "attn")
    q = params.img.proj.q(h_img)
    k = params.txt.proj.k(z_txt.tokens)
    v = params.txt.proj.v(z_txt.tokens)
    ctx = attention_core(q, k, v, spec)
    z1 = T.add(z_img.tokens, T.mul(gate_attn, params.img.proj.out(ctx)))
    h_ff, gate_ff = ada_ln_zero(z1, cond, params.img.adaln, "ff")
    z2 = T.add(z1, T.mul(gate_ff, feed_forward(h_ff, params.img.ffn)))
    return TokenSeq(z2, z_img.positions, z_img.modality)


def _joint_attention(
    streams,
    spec: MultiHeadSpec,
    rope: RotaryTable | None,
    abs_pe: Tensor | None = None,
    abs_pe_grid_w: int = 0,
):
    """Joint full attention over concatenated streams.

    ``streams`` is a list of (q, k, v, positions) per stream; queries are
    concatenated so one softmax covers the whole sequence, then contexts
    are split back per stream.
    """
    qs = T.concat([s[0] for s in streams], axis=-2)
    ks = T.concat([s[1] for s in streams], axis=-2)
    vs = T.concat([s[2] for s in streams], axis=-2)
    positions = np.concatenate([s[3] for s in streams], axis=0)
    # attention sees position-treated q/k; raw projections are returned
    # so packets stay position-free
    qs_att = _maybe_add_abs_pe(qs, positions, abs_pe, abs_pe_grid_w)
    ks_att = _maybe_add_abs_pe(ks, positions, abs_pe, abs_pe_grid_w)
    ctx = attention_core(
        qs_att, ks_att, vs, spec, rope=rope, q_positions=positions, k_positions=positions
    )
    outs = []
    start = 0
    for s in streams:
        length = s[0].shape[-2]
        outs.append(T.narrow(ctx, -2, start, length))
        start += length
    return outs, ks, vs


def mmdit_block_forward(
    z_txt: TokenSeq,
    z_img: TokenSeq,
    cond: Tensor,
    params: MMDiTBlockParams,
    spec: MultiHeadSpec,
    rope: RotaryTable | None = None,
    inject: InjectionSite | None = None,
):
    """Joint text/image block; each modality attends to both.

    Returns the updated (text, image) streams. When ``inject`` is given,
    the packet's cross-attention residual lands between the attention and
    feed-forward sublayers.
    """
    h_txt, gate_t = ada_ln_zero(z_txt.tokens, cond, params.txt.adaln, "attn")
    h_img, gate_i = ada_ln_zero(z_img.tokens, cond, params.img.adaln, "attn")
    streams = [
        (params.txt.proj.q(h_txt), params.txt.proj.k(h_txt), params.txt.proj.v(h_txt), z_txt.positions),
        (params.img.proj.q(h_img), params.img.proj.k(h_img), params.img.proj.v(h_img), z_img.positions),
    ]
    (ctx_t, ctx_i), _, _ = _joint_attention(streams, spec, rope)
    t1 = T.add(z_txt.tokens, T.mul(gate_t, params.txt.proj.out(ctx_t)))
    i1 = T.add(z_img.tokens, T.mul(gate_i, params.img.proj.out(ctx_i)))

    if inject is not None:
        if inject.query_stream == "img":
            host = TokenSeq(i1, z_img.positions, z_img.modality)
            query_input = h_img if inject.query_source == "pre" else i1
            host = inject_cross_attention(
                host,
                inject.packet,
                inject.cross_q,
                spec,
                rope=inject.rope,
                query_input=query_input,
                gate=gate_i if inject.use_gate else None,
                keys=inject.keys,
                mode=inject.mode,
                abs_pe=inject.abs_pe,
                abs_pe_grid_w=_grid_w(z_img.positions),
            )
            i1 = host.tokens
        elif inject.query_stream == "txt":
            host = TokenSeq(t1, z_txt.positions, z_txt.modality)
            query_input = h_txt if inject.query_source == "pre" else t1
            host = inject_cross_attention(
                host,
                inject.packet,
                inject.cross_q,
                spec,
                rope=inject.rope,
                query_input=query_input,
                gate=gate_t if inject.use_gate else None,
                keys=inject.keys,
                mode=inject.mode,
                abs_pe=inject.abs_pe,
                abs_pe_grid_w=_grid_w(z_txt.positions),
            )
            t1 = host.tokens
        else:
            raise ValueError(f"unknown query stream {inject.query_stream!r}")

    h_tf, gate_tf = ada_ln_zero(t1, cond, params.txt.adaln, "ff")
    t2 = T.add(t1, T.mul(gate_tf, feed_forward(h_tf, params.txt.ffn)))
    h_if, gate_if = ada_ln_zero(i1, cond, params.img.adaln, "ff")
    i2 = T.add(i1, T.mul(gate_if, feed_forward(h_if, params.img.ffn)))
    return (
        TokenSeq(t2, z_txt.positions, z_txt.modality),
        TokenSeq(i2, z_img.positions, z_img.modality),
    )


def _grid_w(positions: np.ndarray) -> int:
    return int(positions[:, 1].max()) + 1 if len(positions) else 1


def adapter_block_forward(
    z_ist: TokenSeq,
    z_con: TokenSeq,
    cond: Tensor,
    params: AdapterBlockParams,
    spec: MultiHeadSpec,
    rope: RotaryTable | None = None,
    interaction: str = "mmdit",
    abs_pe: Tensor | None = None,
):
    """Mutual attention between instruction and condition streams.

    Returns the updated streams plus the layer's injection packet built
    from the same (unrotated) keys/values the block attends over. With
    ``interaction='dit'`` the instruction stream is static: it only
    provides keys/values and is never updated (the one-way variant).
    """
    grid_w = _grid_w(z_con.positions)
    h_con, gate_c = ada_ln_zero(z_con.tokens, cond, params.con.adaln, "attn")

    if interaction == "mmdit":
        h_ist, gate_s = ada_ln_zero(z_ist.tokens, cond, params.ist.adaln, "attn")
        streams = [
            (params.ist.proj.q(h_ist), params.ist.proj.k(h_ist), params.ist.proj.v(h_ist), z_ist.positions),
            (params.con.proj.q(h_con), params.con.proj.k(h_con), params.con.proj.v(h_con), z_con.positions),
        ]
        (ctx_s, ctx_c), ks, vs = _joint_attention(streams, spec, rope, abs_pe, grid_w)
        s1 = T.add(z_ist.tokens, T.mul(gate_s, params.ist.proj.out(ctx_s)))
        h_sf, gate_sf = ada_ln_zero(s1, cond, params.ist.adaln, "ff")
        s2 = T.add(s1, T.mul(gate_sf, feed_forward(h_sf, params.ist.ffn)))
    elif interaction == "dit":
        # static instruction: keys/values from the raw stream, no update
        k_ist = params.ist.proj.k(z_ist.tokens)
        v_ist = params.ist.proj.v(z_ist.tokens)
        streams = [
            (None, k_ist, v_ist, z_ist.positions),
            (params.con.proj.q(h_con), params.con.proj.k(h_con), params.con.proj.v(h_con), z_con.positions),
        ]
        k_all = T.concat([k_ist, streams[1][1]], axis=-2)
        v_all = T.concat([v_ist, streams[1][2]], axis=-2)
        positions = np.concatenate([z_ist.positions, z_con.positions], axis=0)
        q_con = streams[1][0]
        q_con = _maybe_add_abs_pe(q_con, z_con.positions, abs_pe, grid_w)
        k_att = _maybe_add_abs_pe(k_all, positions, abs_pe, grid_w)
        ctx_c = attention_core(
            q_con, k_att, v_all, spec, rope=rope,
            q_positions=z_con.positions, k_positions=positions,
        )
        s2 = z_ist.tokens
        ks, vs = k_all, v_all
    else:
        raise ValueError(f"unknown interaction {interaction!r}")

    c1 = T.add(z_con.tokens, T.mul(gate_c, params.con.proj.out(ctx_c)))
    h_cf, gate_cf = ada_ln_zero(c1, cond, params.con.adaln, "ff")
    c2 = T.add(c1, T.mul(gate_cf, feed_forward(h_cf, params.con.ffn)))

    packet = InjectionPacket(
        keys=ks,
        values=vs,
        positions=np.concatenate([z_ist.positions, z_con.positions], axis=0),
        n_ist=z_ist.seq_len,
    )
    return (
        TokenSeq(s2, z_ist.positions, z_ist.modality),
        TokenSeq(c2, z_con.positions, z_con.modality),
        packet,
    )
