"""Full model assembly: backbone, adapter, and the velocity forward pass.

The backbone is a stack of joint text/image blocks over patchified pixels
with learned absolute position embeddings, a shared token embedding
table, a timestep MLP, and a final norm + linear head. The adapter is a
parallel stack over (instruction, condition) streams whose per-layer
keys/values are injected into the backbone through cross-attention.

Parameter partitioning: every backbone parameter and every adapter
feed-forward parameter is frozen; adapter attention/modulation parameters
and the per-layer injection query maps train. The adapter is initialized
by copying backbone weights (instruction <- text stream, condition <-
image stream).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (
    AdaLNZeroParams,
    FeedForwardParams,
    Linear,
    MultiHeadSpec,
    ProjectionSet,
)
from .blocks import (
    AdapterBlockParams,
    InjectionSite,
    MMDiTBlockParams,
    StreamParams,
    adapter_block_forward,
    mmdit_block_forward,
)
from .embeddings import (
    RotaryTable,
    TokenSeq,
    build_rope_table,
    grid_positions,
    patchify_pixels,
    sentinel_positions,
    timestep_features,
    unpatchify,
)
from .rng import derived_rng
from .tensor import Parameter, Tensor

PE_MODES = ("rope", "absolute", "none")
INJECT_MODES = ("cross", "add", "none")


@dataclass
class UnicModelConfig:
    """Desk-scale defaults; toggles default to the final configuration."""

    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 2
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 128
    max_text_len: int = 32
    ffn_mult: int = 4
    adapter_pe: str = "rope"
    backbone_rope: bool = False
    inject_mode: str = "cross"
    inject_keys: str = "both"
    inject_query: str = "img"
    inject_query_source: str = "pre"
    cross_q_new: bool = True
    interaction: str = "mmdit"
    inject_gate: bool = False
    adapter_timestep_cond: bool = True
    init_std: float = 0.02
    # the frozen head must span the velocity range: at sigma = 1/sqrt(dim)
    # a random row maps the unit-variance final stream to O(1) outputs,
    # while 0.02 caps the reachable output RMS an order of magnitude below
    # the flow targets
    head_init_std: float = 0.125
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads {self.heads} must divide dim {self.dim}")
        if self.head_dim % 4:
            raise ValueError(f"head_dim {self.head_dim} must be divisible by 4")
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} must divide image size {self.image_size}")
        if self.adapter_pe not in PE_MODES:
            raise ValueError(f"adapter_pe must be one of {PE_MODES}")
        if self.inject_mode not in INJECT_MODES:
            raise ValueError(f"inject_mode must be one of {INJECT_MODES}")
        if self.inject_keys not in ("both", "ist", "con"):
            raise ValueError("inject_keys must be both|ist|con")
        if self.inject_query not in ("img", "txt"):
            raise ValueError("inject_query must be img|txt")
        if self.inject_query_source not in ("pre", "post"):
            raise ValueError("inject_query_source must be pre|post")
        if self.interaction not in ("mmdit", "dit"):
            raise ValueError("interaction must be mmdit|dit")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32|float64")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_overrides(self, **kw) -> "UnicModelConfig":
        return replace(self, **kw)


@dataclass
class ConditionBundle:
    """Conditioning for one forward pass.

    Token id arrays are (B, L) (or (L,) for a single sample); the
    condition image is (B, C, H, W). Drop flags replace the corresponding
    stream with its null value: a tokenized empty string for text and
    instruction, a zero image for the condition.
    """

    txt_ids: np.ndarray
    ist_ids: np.ndarray
    con_img: np.ndarray
    drop_txt: np.ndarray | bool = False
    drop_ist_con: np.ndarray | bool = False

    def batched(self) -> "ConditionBundle":
        txt = np.atleast_2d(np.asarray(self.txt_ids, dtype=np.int64))
        ist = np.atleast_2d(np.asarray(self.ist_ids, dtype=np.int64))
        con = np.asarray(self.con_img)
        if con.ndim == 3:
            con = con[None]
        b = txt.shape[0]
        drop_txt = np.broadcast_to(np.asarray(self.drop_txt, dtype=bool), (b,)).copy()
        drop_ic = np.broadcast_to(np.asarray(self.drop_ist_con, dtype=bool), (b,)).copy()
        return ConditionBundle(txt, ist, con, drop_txt, drop_ic)

    def resolved(self, null_ids: np.ndarray):
        """Apply drop flags; returns effective (txt_ids, ist_ids, con_img)."""
        b = self.batched()
        txt = np.where(b.drop_txt[:, None], null_ids[None, :], b.txt_ids)
        ist = np.where(b.drop_ist_con[:, None], null_ids[None, :], b.ist_ids)
        con = np.where(
            b.drop_ist_con[:, None, None, None], np.zeros((), dtype=b.con_img.dtype), b.con_img
        )
        return txt, ist, con


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class UnicModel:
    """Backbone + adapter with named, partitioned parameters."""

    def __init__(self, config: UnicModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.rope = build_rope_table(config.head_dim, config.grid, config.grid)
        self._grid_pos = grid_positions(config.grid, config.grid)
        self._build_backbone()
        self._build_adapter()
        init_adapter_from_base(self)

    # -- construction ------------------------------------------------------

    def _new_param(self, name: str, shape, trainable: bool, std: float | None = None) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        cfg = self.config
        if std is None:
            std = cfg.init_std
        rng = derived_rng(self.seed, "init", name)
        data = _truncated_normal(rng, shape, std).astype(cfg.np_dtype)
        p = Parameter(name, data, trainable=trainable)
        self.params[name] = p
        return p

    def _new_bias(self, name: str, size: int, trainable: bool) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.zeros(size, dtype=self.config.np_dtype), trainable=trainable)
        self.params[name] = p
        return p

    def _linear(self, name: str, d_in: int, d_out: int, trainable: bool, std: float | None = None) -> Linear:
        return Linear(
            self._new_param(f"{name}.weight", (d_in, d_out), trainable, std),
            self._new_bias(f"{name}.bias", d_out, trainable),
        )

    def _stream(self, name: str, trainable_attn: bool, trainable_ffn: bool) -> StreamParams:
        d = self.config.dim
        hidden = d * self.config.ffn_mult
        return StreamParams(
            adaln=AdaLNZeroParams(self._linear(f"{name}.adaln", d, 6 * d, trainable_attn)),
            proj=ProjectionSet(
                q=self._linear(f"{name}.attn.q", d, d, trainable_attn),
                k=self._linear(f"{name}.attn.k", d, d, trainable_attn),
                v=self._linear(f"{name}.attn.v", d, d, trainable_attn),
                out=self._linear(f"{name}.attn.out", d, d, trainable_attn),
            ),
            ffn=FeedForwardParams(
                fc1=self._linear(f"{name}.ffn.fc1", d, hidden, trainable_ffn),
                fc2=self._linear(f"{name}.ffn.fc2", hidden, d, trainable_ffn),
            ),
        )

    def _build_backbone(self):
        cfg = self.config
        self.patch_embed = self._linear("backbone.patch_embed", cfg.patch_dim, cfg.dim, False)
        self.pos_embed = self._new_param("backbone.pos_embed", (cfg.n_image_tokens, cfg.dim), False)
        self.token_embed = self._new_param("backbone.token_embed", (cfg.vocab_size, cfg.dim), False)
        self.time_fc1 = self._linear("backbone.time_embed.fc1", cfg.dim, cfg.dim, False)
        self.time_fc2 = self._linear("backbone.time_embed.fc2", cfg.dim, cfg.dim, False)
        self.blocks = [
            MMDiTBlockParams(
                txt=self._stream(f"backbone.block{i}.txt", False, False),
                img=self._stream(f"backbone.block{i}.img", False, False),
            )
            for i in range(cfg.depth)
        ]
        self.head = self._linear("backbone.head", cfg.dim, cfg.patch_dim, False, std=cfg.head_init_std)

    def _build_adapter(self):
        cfg = self.config
        self.adapter_patch_embed = self._linear("adapter.patch_embed", cfg.patch_dim, cfg.dim, False)
        self.adapter_blocks = []
        for i in range(cfg.depth):
            cross_q = (
                self._linear(f"adapter.block{i}.cross_q", cfg.dim, cfg.dim, True)
                if cfg.cross_q_new
                else self.blocks[i].img.proj.q
            )
            self.adapter_blocks.append(
                AdapterBlockParams(
                    ist=self._stream(f"adapter.block{i}.ist", True, False),
                    con=self._stream(f"adapter.block{i}.con", True, False),
                    cross_q=cross_q,
                )
            )
        if cfg.adapter_pe == "absolute":
            self.adapter_abs_pe = self._new_param(
                "adapter.abs_pe", (cfg.n_image_tokens, cfg.dim), True
            )
        else:
            self.adapter_abs_pe = None

    # -- parameter partitioning ---------------------------------------------

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.zero_grad()

    @property
    def spec(self) -> MultiHeadSpec:
        return MultiHeadSpec(self.config.heads, self.config.head_dim)

    @property
    def null_ids(self) -> np.ndarray:
        """Token ids of the null (dropped) text: <null> then padding."""
        ids = np.full(self.config.max_text_len, 1, dtype=np.int64)  # <pad>
        ids[0] = 0  # <null>
        return ids

    # -- forward -------------------------------------------------------------

    def _embed_text(self, ids: np.ndarray) -> Tensor:
        return T.gather_rows(self.token_embed.tensor, np.asarray(ids, dtype=np.int64))

    def _time_cond(self, t: np.ndarray) -> Tensor:
        feats = timestep_features(t, self.config.dim).astype(self.config.np_dtype)
        return self.time_fc2(T.gelu(self.time_fc1(Tensor(feats))))

    def adapter_packets(self, ist_ids: np.ndarray, con_img: np.ndarray, t: np.ndarray):
        """Run the adapter stack; returns one injection packet per layer."""
        cfg = self.config
        if cfg.inject_mode == "none":
            return None
        tokens = self._embed_text(ist_ids)
        pooled = T.reduce_mean(tokens, axis=-2)
        if cfg.adapter_timestep_cond:
            cond = T.add(self._time_cond(t), pooled)
        else:
            cond = pooled
        con_raw = patchify_pixels(np.asarray(con_img, dtype=cfg.np_dtype), cfg.patch)
        con_tokens = self.adapter_patch_embed(Tensor(con_raw))
        z_ist = TokenSeq(tokens, sentinel_positions(tokens.shape[-2]), "instruction")
        z_con = TokenSeq(con_tokens, self._grid_pos, "condition")
        rope = self.rope if cfg.adapter_pe == "rope" else None
        abs_pe = self.adapter_abs_pe.tensor if cfg.adapter_pe == "absolute" else None
        packets = []
        for block in self.adapter_blocks:
            z_ist, z_con, packet = adapter_block_forward(
                z_ist,
                z_con,
                cond,
                block,
                self.spec,
                rope=rope,
                interaction=cfg.interaction,
                abs_pe=abs_pe,
            )
            packets.append(packet)
        return packets

    def backbone_velocity(
        self, z_t: np.ndarray, t: np.ndarray, txt_ids: np.ndarray, packets=None
    ) -> Tensor:
        """Backbone forward over patchified z_t with optional injection."""
        cfg = self.config
        tokens = self._embed_text(txt_ids)
        pooled = T.reduce_mean(tokens, axis=-2)
        cond = T.add(self._time_cond(t), pooled)
        z_arr = np.asarray(z_t, dtype=cfg.np_dtype)
        img_raw = patchify_pixels(z_arr, cfg.patch)
        img_tokens = T.add(self.patch_embed(Tensor(img_raw)), self.pos_embed.tensor)
        z_txt = TokenSeq(tokens, sentinel_positions(tokens.shape[-2]), "text")
        z_img = TokenSeq(img_tokens, self._grid_pos, "image")
        rope = self.rope if cfg.backbone_rope else None
        for i, block in enumerate(self.blocks):
            inject = None
            if packets is not None and cfg.inject_mode != "none":
                inject = InjectionSite(
                    packet=packets[i],
                    cross_q=self.adapter_blocks[i].cross_q,
                    mode=cfg.inject_mode,
                    keys=cfg.inject_keys,
                    query_stream=cfg.inject_query,
                    query_source=cfg.inject_query_source,
                    use_gate=cfg.inject_gate,
                    rope=self.rope if cfg.adapter_pe == "rope" else None,
                    abs_pe=self.adapter_abs_pe.tensor if cfg.adapter_pe == "absolute" else None,
                )
            z_txt, z_img = mmdit_block_forward(
                z_txt, z_img, cond, block, self.spec, rope=rope, inject=inject
            )
        h = T.layer_norm(z_img.tokens)
        out = self.head(h)
        return unpatchify(out, cfg.patch, cfg.channels, cfg.image_size, cfg.image_size)

    def forward_velocity(self, z_t, t, bundle: ConditionBundle) -> Tensor:
        """Velocity prediction for z_t at time t under the given conditioning."""
        cfg = self.config
        z_arr = np.asarray(z_t, dtype=cfg.np_dtype)
        single = z_arr.ndim == 3
        if single:
            z_arr = z_arr[None]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (z_arr.shape[0],))
        txt, ist, con = bundle.resolved(self.null_ids)
        packets = self.adapter_packets(ist, con, t_arr)
        velocity = self.backbone_velocity(z_arr, t_arr, txt, packets)
        if single:
            velocity = T.reshape(velocity, velocity.shape[1:])
        return velocity


def init_adapter_from_base(model: UnicModel) -> dict:
    """Copy backbone weights into the adapter.

    Instruction-stream sublayers copy the text stream, condition-stream
    sublayers copy the image stream, the injection query maps copy the
    image query projections, and the adapter patch embed copies the
    backbone's. Copies are deep: mutating the adapter afterwards leaves
    the backbone untouched.
    """
    mapping = {}
    for i in range(model.config.depth):
        for sub in ("adaln.weight", "adaln.bias", "attn.q.weight", "attn.q.bias",
                    "attn.k.weight", "attn.k.bias", "attn.v.weight", "attn.v.bias",
                    "attn.out.weight", "attn.out.bias", "ffn.fc1.weight", "ffn.fc1.bias",
                    "ffn.fc2.weight", "ffn.fc2.bias"):
            mapping[f"adapter.block{i}.ist.{sub}"] = f"backbone.block{i}.txt.{sub}"
            mapping[f"adapter.block{i}.con.{sub}"] = f"backbone.block{i}.img.{sub}"
        if model.config.cross_q_new:
            mapping[f"adapter.block{i}.cross_q.weight"] = f"backbone.block{i}.img.attn.q.weight"
            mapping[f"adapter.block{i}.cross_q.bias"] = f"backbone.block{i}.img.attn.q.bias"
    mapping["adapter.patch_embed.weight"] = "backbone.patch_embed.weight"
    mapping["adapter.patch_embed.bias"] = "backbone.patch_embed.bias"
    for dst, src in mapping.items():
        if model.params[dst].data.shape != model.params[src].data.shape:
            raise ValueError(f"shape mismatch copying {src} -> {dst}")
        model.params[dst].tensor.data = model.params[src].data.copy()
    return {name: model.params[name] for name in mapping}


def parameter_checksums(model: UnicModel, names=None) -> dict:
    """BLAKE2b digest of each parameter's raw bytes (bitwise identity)."""
    out = {}
    for name, p in model.params.items():
        if names is None or name in names:
            out[name] = hashlib.blake2b(p.data.tobytes(), digest_size=16).hexdigest()
    return out


def frozen_param_names(model: UnicModel) -> list:
    return [name for name, p in model.params.items() if not p.trainable]


@dataclass
class ParameterReport:
    total: int
    trainable: int
    frozen: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total


def parameter_report(model: UnicModel) -> ParameterReport:
    total = sum(p.data.size for p in model.params.values())
    trainable = sum(p.data.size for p in model.params.values() if p.trainable)
    return ParameterReport(total=total, trainable=trainable, frozen=total - trainable)
