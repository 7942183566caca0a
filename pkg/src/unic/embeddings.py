"""Token streams: patchify/unpatchify, timestep and rotary embeddings, text.

Images are tokenized in pixel space: a C×H×W image becomes an
(H/p)·(W/p) sequence of flattened p×p×C patches with patch-grid
coordinates. Instruction tokens carry the sentinel position (0, 0).
The rotary tables implement axial 2D rotations: the first half of each
head is rotated by height angles, the second half by width angles, with
per-pair frequencies theta_i = base^(-i / head_dim).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, linear, rotate_pairs

MODALITIES = ("text", "image", "instruction", "condition")

SENTINEL_POSITION = (0, 0)


@dataclass(frozen=True)
class Position:
    """Patch-grid coordinate (row, column)."""

    h: int
    w: int


@dataclass
class TokenSeq:
    """A token sequence tagged with modality and per-token 2D positions.

    ``tokens`` has shape (seq, dim) or (batch, seq, dim); positions are a
    (seq, 2) integer array shared across the batch.
    """

    tokens: Tensor
    positions: np.ndarray
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        if self.positions.shape[0] != self.seq_len:
            raise ValueError(
                f"positions length {self.positions.shape[0]} != sequence length {self.seq_len}"
            )

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


def sentinel_positions(n: int) -> np.ndarray:
    """(0, 0) for every token; used for text and instruction streams."""
    return np.zeros((n, 2), dtype=np.int64)


def grid_positions(grid_h: int, grid_w: int) -> np.ndarray:
    """Row-major enumeration of patch-grid coordinates."""
    hh, ww = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([hh.reshape(-1), ww.reshape(-1)], axis=1).astype(np.int64)


# -- patchify ---------------------------------------------------------------


def patchify_pixels(img, patch: int) -> np.ndarray:
    """(..., C, H, W) -> (..., (H/p)(W/p), p*p*C) raw patch contents.

    Each token is the p×p×C patch flattened with the channel axis last.
    """
    img = np.asarray(img)
    c, h, w = img.shape[-3:]
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide image extents {h}x{w}")
    gh, gw = h // patch, w // patch
    lead = img.shape[:-3]
    n = len(lead)
    x = img.reshape(lead + (c, gh, patch, gw, patch))
    # (..., c, gh, p, gw, p) -> (..., gh, gw, p, p, c)
    x = x.transpose(tuple(range(n)) + (n + 1, n + 3, n + 2, n + 4, n))
    return np.ascontiguousarray(x.reshape(lead + (gh * gw, patch * patch * c)))


def unpatchify_pixels(tokens: np.ndarray, patch: int, channels: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Inverse of :func:`patchify_pixels`."""
    tokens = np.asarray(tokens)
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(lead + (grid_h, grid_w, patch, patch, channels))
    # (..., gh, gw, p, p, c) -> (..., c, gh, p, gw, p)
    x = x.transpose(tuple(range(n)) + (n + 4, n, n + 2, n + 1, n + 3))
    return np.ascontiguousarray(
        x.reshape(lead + (channels, grid_h * patch, grid_w * patch))
    )


def patchify(img, patch: int, proj=None, modality: str = "image") -> TokenSeq:
    """Tokenize an image into a TokenSeq, optionally projecting to model dim."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    raw = patchify_pixels(img, patch)
    tokens = Tensor(raw)
    if proj is not None:
        tokens = proj(tokens)
    return TokenSeq(tokens, grid_positions(h // patch, w // patch), modality)


def unpatchify(tokens: Tensor, patch: int, channels: int, height: int, width: int) -> Tensor:
    """Token grid back to (..., C, H, W), differentiable."""
    from .tensor import reshape, transpose

    gh, gw = height // patch, width // patch
    lead = tokens.shape[:-2]
    nlead = len(lead)
    x = reshape(tokens, lead + (gh, gw, patch, patch, channels))
    # (..., gh, gw, p, p, c) -> (..., c, gh, p, gw, p)
    axes = tuple(range(nlead)) + (nlead + 4, nlead, nlead + 2, nlead + 1, nlead + 3)
    x = transpose(x, axes)
    return reshape(x, lead + (channels, height, width))


# -- timestep embedding ------------------------------------------------------


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1] over dim/2 log-spaced frequencies.

    Frequencies run from 1 to 1000, so the lowest component is injective
    on [0, 1]. Layout is [sin..., cos...].
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("timestep must lie in [0, 1]")
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 1000.0 ** (np.arange(half) / (half - 1))
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# -- rotary table -------------------------------------------------------------


@dataclass
class RotaryTable:
    """Precomputed axial rotation angles for a head dimension.

    freqs[i] = base^(-i / head_dim) for i in 0 .. head_dim/4 - 1; sin/cos
    are cached for every grid position along each axis.
    """

    head_dim: int
    base: float
    freqs: np.ndarray
    cos: np.ndarray  # (max_pos, head_dim // 4)
    sin: np.ndarray

    def angles_for(self, positions: np.ndarray):
        """Per-token (cos_h, sin_h, cos_w, sin_w), each (seq, head_dim//4)."""
        pos = np.asarray(positions)
        ph, pw = pos[:, 0], pos[:, 1]
        return self.cos[ph], self.sin[ph], self.cos[pw], self.sin[pw]


def build_rope_table(head_dim: int, max_h: int, max_w: int, base: float = 10000.0) -> RotaryTable:
    if head_dim % 4 != 0:
        raise ValueError(f"head_dim must be divisible by 4, got {head_dim}")
    n_freq = head_dim // 4
    freqs = base ** (-np.arange(n_freq, dtype=np.float64) / head_dim)
    max_pos = max(max_h, max_w)
    angles = np.arange(max_pos, dtype=np.float64)[:, None] * freqs[None, :]
    return RotaryTable(
        head_dim=head_dim,
        base=base,
        freqs=freqs,
        cos=np.cos(angles),
        sin=np.sin(angles),
    )


def rope_rotate(f: Tensor, pos, table: RotaryTable) -> Tensor:
    """Rotate one feature vector by its 2D position.

    The first half of f is rotated pairwise by h·theta_i, the second half
    by w·theta_i. Euclidean norm is preserved; position (0, 0) is the
    exact identity.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.shape[-1] != table.head_dim:
        raise ValueError(f"feature dim {f.shape[-1]} != table head_dim {table.head_dim}")
    if isinstance(pos, Position):
        pos = (pos.h, pos.w)
    ch, sh = table.cos[pos[0]], table.sin[pos[0]]
    cw, sw = table.cos[pos[1]], table.sin[pos[1]]
    return rotate_pairs(f, ch, sh, cw, sw)


def rope_rotate_seq(x: Tensor, positions: np.ndarray, table: RotaryTable) -> Tensor:
    """Rotate a (..., seq, head_dim) tensor by per-token positions."""
    ch, sh, cw, sw = table.angles_for(positions)
    if x.dtype == np.float32:
        ch, sh, cw, sw = (a.astype(np.float32) for a in (ch, sh, cw, sw))
    return rotate_pairs(x, ch, sh, cw, sw)


# -- text ---------------------------------------------------------------------

NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (NULL_TOKEN, PAD_TOKEN, UNK_TOKEN)

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class Vocab:
    """Closed vocabulary; line index in the vocab file is the token id."""

    tokens: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(self.tokens) > 512:
            raise ValueError(f"vocabulary exceeds 512 entries: {len(self.tokens)}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicates")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def null_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2


def build_vocab(corpus) -> Vocab:
    """Vocabulary from an iterable of strings, specials first, words sorted."""
    words = set()
    for text in corpus:
        words.update(_WORD_RE.findall(text.lower()))
    return Vocab(list(SPECIAL_TOKENS) + sorted(words))


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    return Vocab(tokens)


def tokenize_text(text: str, vocab: Vocab, max_len: int = 32) -> np.ndarray:
    """Lowercase, split on whitespace/punctuation, map to ids, pad/truncate.

    The empty string maps to a single <null> token; unknown words fall
    back to <unk>. Always returns exactly ``max_len`` ids.
    """
    words = _WORD_RE.findall(text.lower())
    ids = [vocab.index.get(w, vocab.unk_id) for w in words]
    if not ids:
        ids = [vocab.null_id]
    ids = ids[:max_len]
    ids = ids + [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def null_text_ids(vocab: Vocab, max_len: int = 32) -> np.ndarray:
    """Token ids of the dropped-condition placeholder (tokenized empty string)."""
    return tokenize_text("", vocab, max_len)
