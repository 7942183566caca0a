"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops and direct formula
evaluation on NumPy arrays — no engine ops — so it can serve as the
second route for the block-level equivalence checks. Rotations use
explicitly constructed block-diagonal matrices.
"""

import math

import numpy as np


def rope_matrix(pos, table):
    """Explicit rotation matrix for one (h, w) position."""
    d = table.head_dim
    n = d // 4
    m = np.zeros((d, d))
    for axis, coord in enumerate(pos):
        base = axis * (d // 2)
        for i in range(n):
            angle = coord * table.freqs[i]
            c, s = math.cos(angle), math.sin(angle)
            r = base + 2 * i
            m[r, r] = c
            m[r, r + 1] = -s
            m[r + 1, r] = s
            m[r + 1, r + 1] = c
    return m


def ref_layer_norm(x, eps=1e-6):
    x = np.asarray(x, float)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def ref_gelu(x):
    x = np.asarray(x, float)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def ref_linear(lin, x):
    return np.asarray(x, float) @ lin.weight.data + lin.bias.data


def ref_attention(q, k, v, heads, table=None, q_pos=None, k_pos=None):
    """Per-head, per-query explicit-loop scaled dot-product attention."""
    q = np.asarray(q, float)
    k = np.asarray(k, float)
    v = np.asarray(v, float)
    dim = q.shape[-1]
    hd = dim // heads
    out = np.zeros((q.shape[0], dim))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh, kh, vh = q[:, sl].copy(), k[:, sl].copy(), v[:, sl]
        if table is not None:
            qh = np.stack([rope_matrix(q_pos[i], table) @ qh[i] for i in range(len(qh))])
            kh = np.stack([rope_matrix(k_pos[i], table) @ kh[i] for i in range(len(kh))])
        for i in range(q.shape[0]):
            scores = np.array([qh[i] @ kh[j] / math.sqrt(hd) for j in range(k.shape[0])])
            w = np.exp(scores - scores.max())
            w = w / w.sum()
            out[i, sl] = sum(w[j] * vh[j] for j in range(k.shape[0]))
    return out


def ref_modulation(stream, x, cond, which):
    mod = ref_linear(stream.adaln.mod, cond)
    d = x.shape[-1]
    base = 0 if which == "attn" else 3 * d
    shift = mod[..., base : base + d]
    scale = mod[..., base + d : base + 2 * d]
    gate = mod[..., base + 2 * d : base + 3 * d]
    return ref_layer_norm(x) * (1.0 + scale) + shift, gate


def ref_ffn(stream, x):
    return ref_linear(stream.ffn.fc2, ref_gelu(ref_linear(stream.ffn.fc1, x)))


def ref_mmdit_block(z_txt, z_img, cond, params, heads, txt_pos=None, img_pos=None,
                    rope=None, inject=None):
    """Joint text/image block; optional injection between attention and FF.

    ``inject`` is a dict with keys: packet (keys, values, positions arrays),
    cross_q, rope, gate (bool), query_source, keys ('both'|'ist'|'con'),
    n_ist, mode.
    """
    h_txt, gate_t = ref_modulation(params.txt, z_txt, cond, "attn")
    h_img, gate_i = ref_modulation(params.img, z_img, cond, "attn")
    qt = ref_linear(params.txt.proj.q, h_txt)
    kt = ref_linear(params.txt.proj.k, h_txt)
    vt = ref_linear(params.txt.proj.v, h_txt)
    qi = ref_linear(params.img.proj.q, h_img)
    ki = ref_linear(params.img.proj.k, h_img)
    vi = ref_linear(params.img.proj.v, h_img)
    keys = np.concatenate([kt, ki], axis=0)
    values = np.concatenate([vt, vi], axis=0)
    all_pos = None
    if rope is not None:
        all_pos = np.concatenate([txt_pos, img_pos], axis=0)
    ctx_t = ref_attention(qt, keys, values, heads, rope, txt_pos, all_pos)
    ctx_i = ref_attention(qi, keys, values, heads, rope, img_pos, all_pos)
    t1 = z_txt + gate_t * ref_linear(params.txt.proj.out, ctx_t)
    i1 = z_img + gate_i * ref_linear(params.img.proj.out, ctx_i)

    if inject is not None:
        pk, pv, p_pos = inject["packet"]
        which = inject.get("keys", "both")
        n_ist = inject.get("n_ist", 0)
        if which == "ist":
            pk, pv, p_pos = pk[:n_ist], pv[:n_ist], p_pos[:n_ist]
        elif which == "con":
            pk, pv, p_pos = pk[n_ist:], pv[n_ist:], p_pos[n_ist:]
        if inject.get("mode", "cross") == "add":
            update = pv
        else:
            source = h_img if inject.get("query_source", "pre") == "pre" else i1
            q_inj = ref_linear(inject["cross_q"], source)
            update = ref_attention(q_inj, pk, pv, heads, inject.get("rope"), img_pos, p_pos)
        if inject.get("gate", True):
            update = gate_i * update
        i1 = i1 + update

    h_tf, gate_tf = ref_modulation(params.txt, t1, cond, "ff")
    t2 = t1 + gate_tf * ref_ffn(params.txt, h_tf)
    h_if, gate_if = ref_modulation(params.img, i1, cond, "ff")
    i2 = i1 + gate_if * ref_ffn(params.img, h_if)
    return t2, i2


def ref_dit_block(z_img, z_txt, cond, params, heads):
    """One-way block: image queries over static text keys/values."""
    h_img, gate = ref_modulation(params.img, z_img, cond, "attn")
    q = ref_linear(params.img.proj.q, h_img)
    k = ref_linear(params.txt.proj.k, z_txt)
    v = ref_linear(params.txt.proj.v, z_txt)
    ctx = ref_attention(q, k, v, heads)
    z1 = z_img + gate * ref_linear(params.img.proj.out, ctx)
    h_ff, gate_ff = ref_modulation(params.img, z1, cond, "ff")
    return z1 + gate_ff * ref_ffn(params.img, h_ff)


def ref_adapter_block(z_ist, z_con, cond, params, heads, ist_pos, con_pos,
                      rope=None, interaction="mmdit"):
    """Instruction/condition mutual attention; returns streams + packet."""
    all_pos = np.concatenate([ist_pos, con_pos], axis=0)
    h_con, gate_c = ref_modulation(params.con, z_con, cond, "attn")
    q_con = ref_linear(params.con.proj.q, h_con)
    k_con = ref_linear(params.con.proj.k, h_con)
    v_con = ref_linear(params.con.proj.v, h_con)
    if interaction == "mmdit":
        h_ist, gate_s = ref_modulation(params.ist, z_ist, cond, "attn")
        q_ist = ref_linear(params.ist.proj.q, h_ist)
        k_ist = ref_linear(params.ist.proj.k, h_ist)
        v_ist = ref_linear(params.ist.proj.v, h_ist)
    else:
        k_ist = ref_linear(params.ist.proj.k, z_ist)
        v_ist = ref_linear(params.ist.proj.v, z_ist)
    keys = np.concatenate([k_ist, k_con], axis=0)
    values = np.concatenate([v_ist, v_con], axis=0)
    ctx_c = ref_attention(q_con, keys, values, heads, rope, con_pos, all_pos)
    c1 = z_con + gate_c * ref_linear(params.con.proj.out, ctx_c)
    h_cf, gate_cf = ref_modulation(params.con, c1, cond, "ff")
    c2 = c1 + gate_cf * ref_ffn(params.con, h_cf)
    if interaction == "mmdit":
        ctx_s = ref_attention(q_ist, keys, values, heads, rope, ist_pos, all_pos)
        s1 = z_ist + gate_s * ref_linear(params.ist.proj.out, ctx_s)
        h_sf, gate_sf = ref_modulation(params.ist, s1, cond, "ff")
        s2 = s1 + gate_sf * ref_ffn(params.ist, h_sf)
    else:
        s2 = z_ist
    return s2, c2, (keys, values, all_pos)


def ref_inject(z_img, query_input, packet, cross_q, heads, img_pos, rope=None, gate=None):
    """Eq.-style residual cross-attention; no output projection."""
    pk, pv, p_pos = packet
    q = ref_linear(cross_q, query_input)
    ctx = ref_attention(q, pk, pv, heads, rope, img_pos, p_pos)
    if gate is not None:
        ctx = gate * ctx
    return z_img + ctx
